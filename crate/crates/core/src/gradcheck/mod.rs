//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub mod suite;

/// Finite-difference step.
pub const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Elements checked per input; `None` checks all of them.
    pub max_elements: Option<usize>,
    /// Seed for the output projection and element sampling.
    pub seed: u64,
    /// Skip elements whose forward and backward one-sided differences
    /// disagree by more than this relative error: the step straddles a kink.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: STEP,
            max_elements: None,
            seed: 0x5eed,
            kink_tolerance: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat element index with the largest error.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    /// Elements excluded by the kink guard.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error() < tolerance
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Builds `f` on fresh graphs and compares the backward-pass gradient of a
/// scalar reduction of its output against central differences, for every
/// input. Non-scalar outputs are reduced with a fixed random projection so
/// every output element contributes.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut projection: Option<Tensor<f64>> = None;

    let mut evaluate = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = if g.value(out).is_scalar() {
            out
        } else {
            let shape = g.shape(out).to_vec();
            let proj = projection
                .get_or_insert_with(|| Tensor::uniform(shape, -1.0, 1.0, &mut rng))
                .clone();
            let p = g.constant(proj);
            let weighted = g.mul(out, p)?;
            g.sum(weighted)
        };
        let value = g.value(loss).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let out = vars
            .iter()
            .zip(values)
            .map(|(v, t)| grads.get_or_zeros(*v, t.shape()))
            .collect();
        Ok((value, out))
    };

    let (center, analytic) = evaluate(inputs, true)?;
    let mut pick = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let elements: Vec<usize> = match opts.max_elements {
            Some(k) if k < n => {
                let mut e = sample(&mut pick, n, k).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        let mut report = InputReport {
            index: i,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
            skipped: 0,
        };
        for &e in &elements {
            let x0 = input.data()[e];
            work[i].data_mut()[e] = x0 + opts.step;
            let (plus, _) = evaluate(&work, false)?;
            work[i].data_mut()[e] = x0 - opts.step;
            let (minus, _) = evaluate(&work, false)?;
            work[i].data_mut()[e] = x0;
            if let Some(tol) = opts.kink_tolerance {
                let ahead = (plus - center) / opts.step;
                let behind = (center - minus) / opts.step;
                if relative_error(ahead, behind) > tol {
                    report.skipped += 1;
                    continue;
                }
            }
            report.checked += 1;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[e];
            let err = relative_error(a, numeric);
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst_element = e;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradcheckReport { inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_formula() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-10) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn detects_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -0.7, 1.2]).unwrap();
        let ok = gradcheck(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x.clone()],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(ok.passed(1e-6), "{ok:?}");
        // scale() records its factor for backward; a value-only change is invisible to it.
        let bad = gradcheck(
            |g, v| {
                let y = g.scale(v[0], 2.0);
                let c = g.value(y).clone().map(|t| t * t);
                let c = g.constant(c);
                let z = g.add(y, c)?;
                Ok(g.sum(z))
            },
            &[x],
            &GradcheckOptions::default(),
        )
        .unwrap();
        assert!(!bad.passed(1e-4));
    }

    #[test]
    fn kink_guard_skips_only_straddling_steps() {
        let x = Tensor::new(vec![3], vec![0.0, 0.5, -0.25]).unwrap();
        let opts = GradcheckOptions {
            kink_tolerance: Some(1e-2),
            ..GradcheckOptions::default()
        };
        let r = gradcheck(
            |g, v| {
                let y = g.relu(v[0]);
                Ok(g.sum(y))
            },
            &[x],
            &opts,
        )
        .unwrap();
        assert_eq!((r.checked(), r.skipped()), (2, 1));
        assert!(r.passed(1e-8));
    }
}
