//! Per-channel batch normalization for `[N, C, ...]` tensors.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

pub const MOMENTUM: f64 = 0.1;

/// Statistics source for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    /// Normalize with the batch statistics (and report them).
    Train,
    /// Normalize with the supplied running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics of one training-mode call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Population variance, exactly the one used to normalize the batch.
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// Exponential moving update `running = (1 - m) * running + m * batch`.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T]) {
        let m = T::of(MOMENTUM);
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = (T::one() - m) * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNormRecord<T> {
    pub input: Var,
    pub gamma: Var,
    pub beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

/// Iterates `(channel, contiguous spatial run)` pairs of an `[N, C, ...]` buffer.
fn channel_runs(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let inner: usize = shape[2..].iter().product();
    (n, c, inner)
}

pub(crate) fn backward<T: Real>(
    r: &BatchNormRecord<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, inner) = channel_runs(g.shape());
    let count = T::of((n * inner) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let s = (b * c + ch) * inner;
            for k in s..s + inner {
                dgamma[ch] += g.data()[k] * r.xhat[k];
                dbeta[ch] += g.data()[k];
            }
        }
    }
    let mut dx = vec![T::zero(); g.numel()];
    for b in 0..n {
        for ch in 0..c {
            let s = (b * c + ch) * inner;
            let scale = gamma.data()[ch] * r.inv_std[ch];
            for k in s..s + inner {
                dx[k] = if r.training {
                    // dxhat = g * gamma, summed terms expressed via dbeta/dgamma.
                    scale * (g.data()[k] - (dbeta[ch] + r.xhat[k] * dgamma[ch]) / count)
                } else {
                    scale * g.data()[k]
                };
            }
        }
    }
    (
        Tensor::from_parts(g.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

impl<T: Real> Graph<T> {
    /// `gamma * (x - mean) / sqrt(var + eps) + beta` per channel, with statistics
    /// over the batch and all spatial axes in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::shape("batch_norm", format!("expected [N,C,...], got {shape:?}")));
        }
        if !(eps > 0.0) {
            return Err(Error::invalid("batch_norm", format!("eps must be positive, got {eps}")));
        }
        let (n, c, inner) = channel_runs(&shape);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("affine parameter {:?} does not match {c} channels", self.shape(p)),
                ));
            }
        }
        let xd = self.value(x).data();
        let count = n * inner;
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let anchor = xd[ch * inner];
                    let mut shift = T::zero();
                    for b in 0..n {
                        let s = (b * c + ch) * inner;
                        shift += xd[s..s + inner].iter().map(|&v| v - anchor).sum::<T>();
                    }
                    mean[ch] = anchor + shift / T::of(count as f64);
                    let mut sq = T::zero();
                    for b in 0..n {
                        let s = (b * c + ch) * inner;
                        sq += xd[s..s + inner]
                            .iter()
                            .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<T>();
                    }
                    var[ch] = sq / T::of(count as f64);
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let s = (b * c + ch) * inner;
                for k in s..s + inner {
                    xhat[k] = (xd[k] - mean[ch]) * inv_std[ch];
                    out[k] = gd[ch] * xhat[k] + bd[ch];
                }
            }
        }
        let value = Tensor::from_parts(shape, out);
        let v = self.push(
            value,
            Op::BatchNorm(BatchNormRecord {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: matches!(mode, NormMode::Train),
            }),
        );
        Ok((v, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(vec![2, 3, 2, 2], |i| ((i * 7) % 5) as f64 + i as f64 * 0.1));
        let gamma = g.constant(Tensor::ones(vec![3]));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let (y, stats) = g.batch_norm(x, gamma, beta, 1e-12, NormMode::Train).unwrap();
        let y = g.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..4).map(move |k| (b, k)))
                .map(|(b, k)| y.data()[(b * 3 + ch) * 4 + k])
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(stats.unwrap().mean.len(), 3);
    }

    #[test]
    fn running_update_uses_momentum() {
        let stats = BatchStats {
            mean: vec![1.0f64],
            var: vec![3.0],
        };
        let (mut m, mut v) = (vec![0.0], vec![1.0]);
        stats.update_running(&mut m, &mut v);
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((v[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_affine() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![3.0, 5.0]).unwrap());
        let gamma = g.constant(Tensor::full(vec![1], 2.0));
        let beta = g.constant(Tensor::full(vec![1], 1.0));
        let mode = NormMode::Eval {
            mean: &[1.0],
            var: &[4.0 - 1e-5],
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, 1e-5, mode).unwrap();
        assert!(stats.is_none());
        let y = g.value(y).data();
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let p = g.constant(Tensor::ones(vec![1]));
        assert!(g.batch_norm(x, p, p, 0.0, NormMode::Train).is_err());
    }
}
