//! Elementwise, reduction and layout primitives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{split_at_axis, Real, Tensor};

pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub(crate) fn hadamard<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&a, &b)| a * b).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn concat_backward<T: Real>(shapes: &[&[usize]], axis: usize, g: &Tensor<T>) -> Vec<Tensor<T>> {
    let (outer, total, inner) = split_at_axis(g.shape(), axis);
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let len = s[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&g.data()[start..start + len * inner]);
            }
            offset += len;
            Tensor::from_parts(s.to_vec(), data)
        })
        .collect()
}

/// Visits the flat offsets of a hyper-rectangular window, one contiguous
/// last-axis run at a time: `f(source_offset, window_offset, run_len)`.
fn for_each_window_run(
    full: &[usize],
    starts: &[usize],
    window: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = full.len();
    let run = window[rank - 1];
    let rows: usize = window[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    for r in 0..rows {
        let mut src = 0;
        for a in 0..rank - 1 {
            src = src * full[a] + starts[a] + idx[a];
        }
        src = src * full[rank - 1] + starts[rank - 1];
        f(src, r * run, run);
        for a in (0..rank - 1).rev() {
            idx[a] += 1;
            if idx[a] < window[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

pub(crate) fn slice_backward<T: Real>(input_shape: &[usize], starts: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(input_shape.to_vec());
    let data = out.data_mut();
    for_each_window_run(input_shape, starts, g.shape(), |src, dst, len| {
        data[src..src + len].copy_from_slice(&g.data()[dst..dst + len]);
    });
    out
}

pub(crate) fn softmax_forward<T: Real>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..len {
                let e = (xd[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, axis: usize, g: &Tensor<T>) -> Tensor<T> {
    let (outer, len, inner) = split_at_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![T::zero(); y.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: T = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

impl<T: Real> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operands differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = hadamard(self.value(a), self.value(b));
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.shape(*v).to_vec()).collect();
        let Some(first) = shapes.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let compatible = axis < first.len()
            && shapes.iter().all(|s| {
                s.len() == first.len()
                    && s.iter().zip(first).enumerate().all(|(a, (x, y))| a == axis || x == y)
            });
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("inputs disagree off axis {axis}: {shapes:?}"),
            ));
        }
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (v, s) in inputs.iter().zip(&shapes) {
                let run = s[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * run..(o + 1) * run]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Hyper-rectangular window `[starts, starts + sizes)` of `x`.
    pub fn slice(&mut self, x: Var, starts: &[usize], sizes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ok = starts.len() == shape.len()
            && sizes.len() == shape.len()
            && (0..shape.len()).all(|a| sizes[a] >= 1 && starts[a] + sizes[a] <= shape[a]);
        if !ok {
            return Err(Error::shape(
                "slice",
                format!("window {starts:?}+{sizes:?} outside {shape:?}"),
            ));
        }
        if starts.iter().all(|&s| s == 0) && sizes == shape.as_slice() {
            return self.reshape(x, &shape);
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); sizes.iter().product()];
        for_each_window_run(&shape, starts, sizes, |s, d, len| {
            data[d..d + len].copy_from_slice(&src[s..s + len]);
        });
        let value = Tensor::from_parts(sizes.to_vec(), data);
        Ok(self.push(
            value,
            Op::Slice {
                input: x,
                starts: starts.to_vec(),
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        let value = softmax_forward(self.value(x), axis);
        Ok(self.push(value, Op::Softmax { input: x, axis }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_sizes_add_and_mismatch_is_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 4, 4]));
        let b = g.constant(Tensor::ones(vec![1, 3, 4, 4]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[1, 5, 4, 4]);
        assert_eq!(g.value(c).at(&[0, 1, 3, 3]), 0.0);
        assert_eq!(g.value(c).at(&[0, 2, 0, 0]), 1.0);
        let d = g.constant(Tensor::zeros(vec![1, 3, 4, 5]));
        let err = g.concat(&[a, d], 1).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 4, 5]"), "{err}");
    }

    #[test]
    fn slice_extracts_window() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let y = g.slice(x, &[1, 1, 2], &[1, 2, 2]).unwrap();
        assert_eq!(g.value(y).data(), &[18.0, 19.0, 22.0, 23.0]);
    }
}
