//! First-order optimizers over a flat list of parameter tensors.

use crate::config::{OptimizerKind, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd {
        lr: f32,
    },
    Adam {
        lr: f32,
        beta1: f32,
        beta2: f32,
        eps: f32,
        /// Completed updates.
        t: u64,
        m: Vec<Tensor<f32>>,
        v: Vec<Tensor<f32>>,
    },
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[Tensor<f32>]) -> Self {
        let lr = cfg.learning_rate as f32;
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros: Vec<Tensor<f32>> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
                Optimizer::Adam {
                    lr,
                    beta1: cfg.beta1 as f32,
                    beta2: cfg.beta2 as f32,
                    eps: cfg.adam_eps as f32,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    /// Applies one update. `grads[i]` pairs with `params[i]`; `None` means no
    /// gradient reached that parameter.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<&Tensor<f32>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "optimizer step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (p, g) in params.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::shape(
                        "optimizer step",
                        format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                    ));
                }
            }
        }
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= *lr * d;
                        }
                    }
                }
            }
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - (*beta1 as f64).powf(*t as f64);
                let c2 = 1.0 - (*beta2 as f64).powf(*t as f64);
                let (c1, c2) = (c1 as f32, c2 as f32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    let Some(g) = g else { continue };
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * d;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= *lr * mhat / (vhat.sqrt() + *eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Named state tensors for checkpointing.
    pub fn state_tensors(&self, names: &[String]) -> Vec<(String, Tensor<f32>)> {
        match self {
            Optimizer::Sgd { .. } => Vec::new(),
            Optimizer::Adam { m, v, .. } => names
                .iter()
                .zip(m)
                .map(|(n, t)| (format!("adam.m.{n}"), t.clone()))
                .chain(names.iter().zip(v).map(|(n, t)| (format!("adam.v.{n}"), t.clone())))
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Sgd { .. } => 0,
            Optimizer::Adam { t, .. } => *t,
        }
    }

    /// Restores moments saved by [`Optimizer::state_tensors`].
    pub fn restore(&mut self, names: &[String], t_saved: u64, lookup: impl Fn(&str) -> Option<Tensor<f32>>) -> Result<()> {
        if let Optimizer::Adam { t, m, v, .. } = self {
            for (i, n) in names.iter().enumerate() {
                for (prefix, store) in [("adam.m.", &mut *m), ("adam.v.", &mut *v)] {
                    let key = format!("{prefix}{n}");
                    let saved = lookup(&key).ok_or_else(|| Error::Config(format!("checkpoint lacks '{key}'")))?;
                    if saved.shape() != store[i].shape() {
                        return Err(Error::shape("restore optimizer", format!("'{key}' has shape {:?}", saved.shape())));
                    }
                    store[i] = saved;
                }
            }
            *t = t_saved;
        }
        Ok(())
    }
}
