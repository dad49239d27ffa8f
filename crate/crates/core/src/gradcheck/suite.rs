//! Named gradient checks over every primitive and over the whole network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::config::NetworkConfig;
use crate::data::synth::{generate_sample, SyntheticSpec};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::model::Network;
use crate::nn::{Ctx, ModelState, Mode};
use crate::objective;
use crate::ops::NormMode;
use crate::tensor::Tensor;

/// Tolerance for single primitives.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
/// Tolerance for the composed network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Moves every entry at least `gap` away from zero.
fn off_zero(t: Tensor<f64>, gap: f64) -> Tensor<f64> {
    t.map(|v| if v.abs() < gap { v + gap * v.signum() } else { v })
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn cases() -> Vec<Case> {
    let x4 = randn(&[2, 2, 5, 6], 10);
    let x5 = randn(&[1, 2, 3, 4, 3], 11);
    let w3 = randn(&[2, 2, 3, 3, 3], 12);
    let b2 = randn(&[2], 13);
    let target = randn(&[1, 3, 4], 14);
    let noise = randn(&[12], 15);
    let pred = Tensor::from_fn(vec![1, 3, 4], |i| {
        let r = noise.data()[i] * 2.0;
        let r = if (r.abs() - 1.0).abs() < 0.1 { r + 0.3 } else { r };
        target.data()[i] + r
    });
    let mask: Vec<bool> = (0..12).map(|i| i % 5 != 0).collect();
    let probabilities = Tensor::uniform(vec![1, 1, 4, 2, 3], 0.0, 0.2, &mut ChaCha8Rng::seed_from_u64(34));
    let bn_mean = [0.1, -0.2];
    let bn_var = [1.5, 0.5];
    vec![
        case("add", vec![x4.clone(), randn(&[2, 2, 5, 6], 20)], |g, v| g.add(v[0], v[1])),
        case("mul", vec![x4.clone(), randn(&[2, 2, 5, 6], 21)], |g, v| g.mul(v[0], v[1])),
        case("scale", vec![x4.clone()], |g, v| Ok(g.scale(v[0], -1.5))),
        case("sum", vec![x4.clone()], |g, v| Ok(g.sum(v[0]))),
        case("reshape", vec![x4.clone()], |g, v| g.reshape(v[0], &[4, 30])),
        case("relu", vec![off_zero(x4.clone(), 0.05)], |g, v| Ok(g.relu(v[0]))),
        case("concat", vec![x4.clone(), randn(&[2, 1, 5, 6], 22)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("slice", vec![x4.clone()], |g, v| g.slice(v[0], &[1, 0, 1, 2], &[1, 2, 3, 3])),
        case("softmax", vec![randn(&[2, 4, 3], 23)], |g, v| g.softmax(v[0], 1)),
        case("conv2d", vec![x4.clone(), randn(&[3, 2, 3, 3], 24), randn(&[3], 25)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1)
        }),
        case("conv2d_strided", vec![x4.clone(), randn(&[3, 2, 3, 3], 26), randn(&[3], 27)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1, 1)
        }),
        case("conv2d_dilated", vec![x4.clone(), randn(&[3, 2, 3, 3], 28), randn(&[3], 29)], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 2, 2)
        }),
        case("conv3d", vec![x5.clone(), w3.clone(), b2.clone()], |g, v| {
            g.conv3d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        case("deconv3d", vec![x5.clone(), w3, b2.clone()], |g, v| {
            g.deconv3d(v[0], v[1], Some(v[2]), 2, 1, 1)
        }),
        case("avg_pool2d", vec![x4.clone()], |g, v| g.avg_pool2d(v[0], 2)),
        case("adaptive_avg_pool2d", vec![x4.clone()], |g, v| g.adaptive_avg_pool2d(v[0], 2, 4)),
        case("bilinear_upsample2d", vec![x4.clone()], |g, v| g.bilinear_upsample2d(v[0], 9, 11)),
        case("trilinear_upsample3d", vec![x5.clone()], |g, v| g.trilinear_upsample3d(v[0], 5, 7, 6)),
        case("batch_norm_train", vec![x5.clone(), randn(&[2], 30), b2.clone()], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, NormMode::Train)?.0)
        }),
        case("batch_norm_eval", vec![x5, randn(&[2], 31), b2], move |g, v| {
            let mode = NormMode::Eval {
                mean: &bn_mean,
                var: &bn_var,
            };
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, mode)?.0)
        }),
        case("cost_volume", vec![randn(&[1, 2, 2, 5], 32), randn(&[1, 2, 2, 5], 33)], |g, v| {
            g.cost_volume(v[0], v[1], 3)
        }),
        case("expectation", vec![probabilities], |g, v| g.expectation(v[0], 2)),
        case("smooth_l1_loss", vec![pred], move |g, v| g.smooth_l1_loss(v[0], &target, &mask)),
    ]
}

/// Runs every primitive check, in a fixed order.
pub fn primitive_suite() -> Result<Vec<(&'static str, GradcheckReport)>> {
    let opts = GradcheckOptions::default();
    cases()
        .into_iter()
        .map(|c| Ok((c.name, gradcheck(&c.build, &c.inputs, &opts)?)))
        .collect()
}

/// Small network used for the end-to-end check. With normalization on, the
/// deepest 3D layers normalize one or two voxels, which behaves like a sign
/// function of width `sqrt(bn_eps)`; the check then uses a wider `bn_eps` so
/// a finite-difference step stays inside the smooth region.
pub fn network_check_config(batchnorm: bool) -> NetworkConfig {
    NetworkConfig {
        use_batchnorm: batchnorm,
        bn_eps: if batchnorm { 1e-3 } else { 1e-5 },
        base_channels: 4,
        block_counts: [1, 1, 1],
        stage_channels: [4, 8, 8],
        branch_channels: 4,
        pyramid_hidden: 8,
        fusion_channels: 4,
        matcher_channels: [4, 4, 4, 4],
        d_max: 16,
        ..NetworkConfig::default()
    }
}

/// Kaiming weights, plus random shifts on biases and normalization affine
/// terms so no activation sits exactly on a kink.
fn network_check_state(net: &Network) -> ModelState<f64> {
    let mut state = net.init::<f64>(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (p, info) in state.params.iter_mut().zip(net.registry().params()) {
        if info.name.ends_with(".weight") {
            continue;
        }
        let base = if info.name.ends_with(".gamma") { 1.0 } else { 0.0 };
        let noise = Tensor::uniform(p.shape().to_vec(), -0.5, 0.5, &mut rng);
        *p = noise.map(|v| v + base);
    }
    state
}

/// Gradient of the training loss of a 16x32 pair under `cfg` with respect to every
/// network parameter. Steps that straddle a ReLU kink are skipped and
/// counted; `max_elements` bounds the elements checked per tensor.
pub fn network_gradcheck(cfg: &NetworkConfig, max_elements: Option<usize>) -> Result<GradcheckReport> {
    let net = Network::new(cfg.clone())?;
    let state = network_check_state(&net);
    let sample = generate_sample(&SyntheticSpec::random(32, 16, cfg.d_max, 9))?;
    let (left, right) = sample.batch::<f64>()?;
    let gt = sample.gt.cast::<f64>().reshape(vec![1, 16, 32])?;
    let mask = sample.training_mask(cfg.d_max);
    let eps = net.config().bn_eps;
    let opts = GradcheckOptions {
        max_elements,
        kink_tolerance: Some(KINK_TOLERANCE),
        ..GradcheckOptions::default()
    };
    gradcheck(
        |g, vars| {
            let mut ctx = Ctx::with_vars(g, vars.to_vec(), &state.buffers, Mode::Train, eps);
            let pred = net.forward(&mut ctx, &left, &right)?;
            objective::loss(ctx.graph, pred, &gt, &mask)
        },
        &state.params,
        &opts,
    )
}

/// One-sided difference disagreement that marks a kink crossing.
pub const KINK_TOLERANCE: f64 = 1e-3;
/// Largest tolerated fraction of skipped elements. Near-degenerate batch
/// statistics put more elements next to a kink.
pub fn max_skipped_fraction(batchnorm: bool) -> f64 {
    if batchnorm {
        0.10
    } else {
        0.02
    }
}

/// Fraction of visited elements that were skipped.
pub fn skipped_fraction(r: &GradcheckReport) -> f64 {
    r.skipped() as f64 / (r.checked() + r.skipped()).max(1) as f64
}

/// Network verdict: every compared element within tolerance and few skips.
pub fn network_check_passed(r: &GradcheckReport, batchnorm: bool) -> bool {
    r.checked() > 0 && r.passed(NETWORK_TOLERANCE) && skipped_fraction(r) <= max_skipped_fraction(batchnorm)
}
