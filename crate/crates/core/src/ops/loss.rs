//! Masked mean smooth-L1 loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

/// `0.5 x^2` for `|x| < 1`, `|x| - 0.5` otherwise.
pub fn smooth_l1<T: Real>(x: T) -> T {
    let a = x.abs();
    if a < T::one() {
        T::of(0.5) * x * x
    } else {
        a - T::of(0.5)
    }
}

/// Derivative of [`smooth_l1`]; equals `x` inside the unit interval and `sign(x)` outside.
pub fn smooth_l1_grad<T: Real>(x: T) -> T {
    if x.abs() < T::one() {
        x
    } else {
        x.signum()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SmoothL1Record<T> {
    pub pred: Var,
    target: Vec<T>,
    mask: Vec<bool>,
    count: usize,
}

pub(crate) fn smooth_l1_backward<T: Real>(r: &SmoothL1Record<T>, pred: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let scale = g.item() / T::of(r.count as f64);
    let data = pred
        .data()
        .iter()
        .zip(&r.target)
        .zip(&r.mask)
        .map(|((&p, &t), &m)| if m { scale * smooth_l1_grad(p - t) } else { T::zero() })
        .collect();
    Tensor::from_parts(pred.shape().to_vec(), data)
}

impl<T: Real> Graph<T> {
    /// Mean of `smooth_l1(pred - target)` over pixels where `mask` is set.
    pub fn smooth_l1_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(pred);
        if shape != target.shape() || mask.len() != target.numel() {
            return Err(Error::shape(
                "smooth_l1_loss",
                format!(
                    "prediction {shape:?}, target {:?} and mask of {} entries must agree",
                    target.shape(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate {
                what: "loss",
                detail: "sample has no valid pixels".into(),
            });
        }
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &t), _)| smooth_l1(p - t))
            .sum();
        let value = Tensor::scalar(total / T::of(count as f64));
        Ok(self.push(
            value,
            Op::SmoothL1(SmoothL1Record {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                count,
            }),
        ))
    }
}
