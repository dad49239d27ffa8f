//! Stereo-specific primitives: concatenation cost volume and the expected
//! index along a probability axis.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{split_at_axis, Real, Tensor};

/// Builds `[N, 2C, D, H, W]` from two `[N, C, H, W]` feature maps: the first
/// `C` channels repeat the left features at every level `d`, the last `C`
/// hold the right features shifted right by `d` with zeros where `x < d`.
pub(crate) fn cost_volume_forward<T: Real>(left: &Tensor<T>, right: &Tensor<T>, levels: usize) -> Tensor<T> {
    let [n, c, h, w] = [left.shape()[0], left.shape()[1], left.shape()[2], left.shape()[3]];
    let plane = h * w;
    let mut out = vec![T::zero(); n * 2 * c * levels * plane];
    for b in 0..n {
        for ch in 0..c {
            let l = &left.data()[(b * c + ch) * plane..][..plane];
            let r = &right.data()[(b * c + ch) * plane..][..plane];
            for d in 0..levels {
                let lo = ((b * 2 * c + ch) * levels + d) * plane;
                out[lo..lo + plane].copy_from_slice(l);
                let ro = ((b * 2 * c + c + ch) * levels + d) * plane;
                if d < w {
                    for y in 0..h {
                        let dst = &mut out[ro + y * w + d..ro + (y + 1) * w];
                        dst.copy_from_slice(&r[y * w..y * w + w - d]);
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![n, 2 * c, levels, h, w], out)
}

pub(crate) fn cost_volume_backward<T: Real>(feature_shape: &[usize], g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = [feature_shape[0], feature_shape[1], feature_shape[2], feature_shape[3]];
    let levels = g.shape()[2];
    let plane = h * w;
    let mut dl = vec![T::zero(); n * c * plane];
    let mut dr = vec![T::zero(); n * c * plane];
    for b in 0..n {
        for ch in 0..c {
            let dl = &mut dl[(b * c + ch) * plane..][..plane];
            let dr = &mut dr[(b * c + ch) * plane..][..plane];
            for d in 0..levels {
                let lo = ((b * 2 * c + ch) * levels + d) * plane;
                for (a, &v) in dl.iter_mut().zip(&g.data()[lo..lo + plane]) {
                    *a += v;
                }
                if d >= w {
                    continue;
                }
                let ro = ((b * 2 * c + c + ch) * levels + d) * plane;
                for y in 0..h {
                    let src = &g.data()[ro + y * w + d..ro + (y + 1) * w];
                    for (a, &v) in dr[y * w..y * w + w - d].iter_mut().zip(src) {
                        *a += v;
                    }
                }
            }
        }
    }
    let shape = feature_shape.to_vec();
    (Tensor::from_parts(shape.clone(), dl), Tensor::from_parts(shape, dr))
}

pub(crate) fn expectation_backward<T: Real>(input_shape: &[usize], axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(input_shape, axis);
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            let idx = T::of(k as f64);
            for i in 0..inner {
                out[(o * len + k) * inner + i] = idx * g.data()[o * inner + i];
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

impl<T: Real> Graph<T> {
    pub fn cost_volume(&mut self, left: Var, right: Var, levels: usize) -> Result<Var> {
        let ls = self.shape(left).to_vec();
        let rs = self.shape(right).to_vec();
        if ls.len() != 4 || ls != rs {
            return Err(Error::shape(
                "cost_volume",
                format!("left {ls:?} and right {rs:?} must be identical [N,C,H,W] maps"),
            ));
        }
        if levels == 0 {
            return Err(Error::invalid("cost_volume", "need at least one disparity level"));
        }
        let value = cost_volume_forward(self.value(left), self.value(right), levels);
        Ok(self.push(value, Op::CostVolume { left, right }))
    }

    /// `sum_k k * p[.., k, ..]` along `axis`, which is removed from the shape.
    /// Values are clamped into `[0, len - 1]` to absorb rounding in `p`.
    pub fn expectation(&mut self, p: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::invalid("expectation", format!("axis {axis} invalid for {shape:?}")));
        }
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let top = T::of((len - 1) as f64);
        let pd = self.value(p).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let idx = T::of(k as f64);
                for i in 0..inner {
                    out[o * inner + i] += idx * pd[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.max(T::zero()).min(top));
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.push(value, Op::Expectation { input: p, axis }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_channel_shift_example() {
        let mut g = Graph::<f32>::new();
        let l = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let r = g.constant(Tensor::new(vec![1, 1, 1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let v = g.cost_volume(l, r, 2).unwrap();
        let t = g.value(v);
        assert_eq!(t.shape(), &[1, 2, 2, 1, 3]);
        let row = |c: usize, d: usize| (0..3).map(|x| t.at(&[0, c, d, 0, x])).collect::<Vec<_>>();
        assert_eq!(row(0, 1), vec![1.0, 2.0, 3.0]);
        assert_eq!(row(1, 1), vec![0.0, 4.0, 5.0]);
        assert_eq!(row(1, 0), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn levels_beyond_width_are_zero() {
        let mut g = Graph::<f32>::new();
        let l = g.constant(Tensor::ones(vec![1, 1, 2, 2]));
        let v = g.cost_volume(l, l, 4).unwrap();
        let t = g.value(v);
        for d in 2..4 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(t.at(&[0, 1, d, y, x]), 0.0);
                }
            }
        }
    }

    #[test]
    fn expectation_of_uniform() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::full(vec![1, 4, 2], 0.25));
        let e = g.expectation(p, 1).unwrap();
        assert_eq!(g.shape(e), &[1, 2]);
        assert_eq!(g.value(e).data(), &[1.5, 1.5]);
    }

    #[test]
    fn mismatched_maps_are_rejected() {
        let mut g = Graph::<f32>::new();
        let l = g.constant(Tensor::ones(vec![1, 2, 2, 2]));
        let r = g.constant(Tensor::ones(vec![1, 2, 2, 3]));
        assert!(g.cost_volume(l, r, 1).is_err());
    }
}
