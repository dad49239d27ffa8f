//! Align-corners bilinear and trilinear resampling.
//!
//! Implemented as one linear-interpolation pass per spatial axis. Each pass
//! evaluates `a + t * (b - a)`, so constant fields and corner samples are
//! reproduced exactly.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{split_at_axis, Real, Tensor};

/// Source pair and weight for one output index.
#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    t: T,
}

fn axis_taps<T: Real>(input: usize, output: usize) -> Vec<Tap<T>> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return Tap { lo: 0, hi: 0, t: T::zero() };
            }
            let pos = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            if lo == input - 1 {
                return Tap { lo, hi: lo, t: T::zero() };
            }
            Tap {
                lo,
                hi: lo + 1,
                t: T::of(pos - lo as f64),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Pass<T> {
    axis: usize,
    in_shape: Vec<usize>,
    taps: Vec<Tap<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct InterpRecord<T> {
    pub input: Var,
    passes: Vec<Pass<T>>,
}

fn lerp_axis<T: Real>(x: &[T], shape: &[usize], axis: usize, taps: &[Tap<T>]) -> (Vec<T>, Vec<usize>) {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let out_len = taps.len();
    let mut out = vec![T::zero(); outer * out_len * inner];
    for o in 0..outer {
        let src = &x[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * out_len * inner..(o + 1) * out_len * inner];
        for (k, tap) in taps.iter().enumerate() {
            let a = &src[tap.lo * inner..(tap.lo + 1) * inner];
            let b = &src[tap.hi * inner..(tap.hi + 1) * inner];
            for ((d, &a), &b) in dst[k * inner..(k + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = a + tap.t * (b - a);
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[axis] = out_len;
    (out, out_shape)
}

fn lerp_axis_adjoint<T: Real>(g: &[T], pass: &Pass<T>) -> Vec<T> {
    let (outer, len, inner) = split_at_axis(&pass.in_shape, pass.axis);
    let out_len = pass.taps.len();
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let src = &g[o * out_len * inner..(o + 1) * out_len * inner];
        let dst = &mut dx[o * len * inner..(o + 1) * len * inner];
        for (k, tap) in pass.taps.iter().enumerate() {
            let gk = &src[k * inner..(k + 1) * inner];
            let wa = T::one() - tap.t;
            for (j, &gv) in gk.iter().enumerate() {
                dst[tap.lo * inner + j] += wa * gv;
                dst[tap.hi * inner + j] += tap.t * gv;
            }
        }
    }
    dx
}

pub(crate) fn backward<T: Real>(r: &InterpRecord<T>, input_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let mut grad = g.data().to_vec();
    for pass in r.passes.iter().rev() {
        grad = lerp_axis_adjoint(&grad, pass);
    }
    Tensor::from_parts(input_shape.to_vec(), grad)
}

impl<T: Real> Graph<T> {
    /// Bilinear upsampling of `[N,C,h,w]` to `[N,C,out_h,out_w]`.
    pub fn bilinear_upsample2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("bilinear_upsample2d", format!("expected [N,C,H,W], got {shape:?}")));
        }
        if out_h < shape[2] || out_w < shape[3] {
            return Err(Error::invalid(
                "bilinear_upsample2d",
                format!("target {out_h}x{out_w} is smaller than input {}x{}", shape[2], shape[3]),
            ));
        }
        self.interpolate(x, &[out_h, out_w])
    }

    /// Trilinear upsampling of `[N,C,d,h,w]` to `[N,C,out_d,out_h,out_w]`.
    pub fn trilinear_upsample3d(&mut self, x: Var, out_d: usize, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(Error::shape("trilinear_upsample3d", format!("expected [N,C,D,H,W], got {shape:?}")));
        }
        if out_d < shape[2] || out_h < shape[3] || out_w < shape[4] {
            return Err(Error::invalid(
                "trilinear_upsample3d",
                format!("target {out_d}x{out_h}x{out_w} is smaller than input {:?}", &shape[2..]),
            ));
        }
        self.interpolate(x, &[out_d, out_h, out_w])
    }

    /// Align-corners resampling of the trailing axes to `size`.
    pub(crate) fn interpolate(&mut self, x: Var, size: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let first = shape.len() - size.len();
        if size.contains(&0) {
            return Err(Error::invalid("interpolate", format!("zero target extent {size:?}")));
        }
        let mut data = self.value(x).data().to_vec();
        let mut cur = shape.clone();
        let mut passes = Vec::new();
        for (k, &target) in size.iter().enumerate().rev() {
            let axis = first + k;
            if cur[axis] == target {
                continue;
            }
            let taps = axis_taps::<T>(cur[axis], target);
            let (next, next_shape) = lerp_axis(&data, &cur, axis, &taps);
            passes.push(Pass {
                axis,
                in_shape: cur,
                taps,
            });
            data = next;
            cur = next_shape;
        }
        let value = Tensor::from_parts(cur, data);
        Ok(self.push(value, Op::Interp(InterpRecord { input: x, passes })))
    }
}
