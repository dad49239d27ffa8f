//! Training step, seeded sample stream and checkpoint conversion.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{KeyValues, NetworkConfig, TrainConfig};
use crate::data::checkpoint::Checkpoint;
use crate::data::synth::{generate_sample, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Network;
use crate::nn::{apply_stats, ModelState, Mode};
use crate::objective::{self, StereoSample};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub model: ModelState<f32>,
    pub optimizer: Optimizer,
}

impl TrainState {
    /// Fresh weights drawn from `cfg.seed`.
    pub fn new(net: &Network, cfg: &TrainConfig) -> Self {
        let model = net.init(cfg.seed);
        let optimizer = Optimizer::new(cfg, &model.params);
        TrainState {
            step: 0,
            model,
            optimizer,
        }
    }
}

/// One forward, backward and optimizer update on `sample`. Returns the loss
/// before the update.
pub fn train_step(net: &Network, state: &mut TrainState, sample: &StereoSample) -> Result<f32> {
    let mask = sample.training_mask(net.config().d_max);
    let (left, right) = sample.batch::<f32>()?;
    let gt = sample.gt.clone().reshape(vec![1, sample.height(), sample.width()])?;
    let mut g = Graph::new();
    let mut ctx = net.bind(&mut g, &state.model, Mode::Train, true);
    let pred = net.forward(&mut ctx, &left, &right)?;
    let stats = std::mem::take(&mut ctx.stats);
    let vars = ctx.param_vars().to_vec();
    let loss = objective::loss(&mut g, pred, &gt, &mask)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        let stage = match g.first_non_finite() {
            Some((v, op)) => format!("forward node {} ({op})", v.index()),
            None => "loss".to_string(),
        };
        return Err(Error::NonFinite { stage });
    }
    let grads = g.backward(loss)?;
    let names = net.registry().params();
    let grads: Vec<Option<&Tensor<f32>>> = vars.iter().map(|&v| grads.get(v)).collect();
    for (i, gr) in grads.iter().enumerate() {
        if gr.is_some_and(|t| !t.all_finite()) {
            return Err(Error::NonFinite {
                stage: format!("backward, gradient of {}", names[i].name),
            });
        }
    }
    state.optimizer.step(&mut state.model.params, &grads)?;
    apply_stats(&mut state.model, &stats);
    state.step += 1;
    Ok(value)
}

/// Seed of the `index`-th sample of the stream rooted at `seed`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

/// The `index`-th training sample of the stream rooted at `cfg.seed`.
pub fn stream_sample(cfg: &TrainConfig, d_max: usize, index: u64) -> Result<StereoSample> {
    let spec = SyntheticSpec::random(cfg.crop_w, cfg.crop_h, d_max, stream_seed(cfg.seed, index));
    generate_sample(&spec)
}

/// Runs `cfg.steps - state.step` further steps, drawing samples from
/// `source` and reporting each loss to `on_step`.
pub fn train<S, L>(net: &Network, cfg: &TrainConfig, state: &mut TrainState, mut source: S, mut on_step: L) -> Result<Vec<f32>>
where
    S: FnMut(u64) -> Result<StereoSample>,
    L: FnMut(&TrainState, f32) -> Result<()>,
{
    let mut losses = Vec::new();
    while (state.step as usize) < cfg.steps {
        let sample = source(state.step)?;
        let loss = train_step(net, state, &sample)?;
        losses.push(loss);
        on_step(state, loss)?;
    }
    Ok(losses)
}

/// Mean end-point error of `model` over `samples`, in inference mode.
pub fn mean_epe(net: &Network, model: &ModelState<f32>, samples: &[StereoSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Degenerate {
            what: "mean_epe",
            detail: "no samples".into(),
        });
    }
    let mut total = 0.0;
    for s in samples {
        let (l, r) = s.batch::<f32>()?;
        let pred = net.predict(model, &l, &r)?;
        let mask = s.training_mask(net.config().d_max);
        total += objective::epe(pred.disparity.data(), s.gt.data(), &mask)?;
    }
    Ok(total / samples.len() as f64)
}

fn state_names(net: &Network) -> (Vec<String>, Vec<String>) {
    let reg = net.registry();
    (
        reg.params().iter().map(|p| p.name.clone()).collect(),
        reg.buffers().iter().map(|b| b.name.clone()).collect(),
    )
}

pub fn to_checkpoint(net: &Network, cfg: &TrainConfig, state: &TrainState) -> Checkpoint {
    let mut config = KeyValues::default();
    net.config().write_into(&mut config);
    cfg.write_into(&mut config);
    config.insert("step", state.step);
    config.insert("optimizer_updates", state.optimizer.steps_taken());
    let (pn, bn) = state_names(net);
    let mut tensors: Vec<(String, Tensor<f32>)> = pn.iter().cloned().zip(state.model.params.iter().cloned()).collect();
    tensors.extend(bn.iter().cloned().zip(state.model.buffers.iter().cloned()));
    tensors.extend(state.optimizer.state_tensors(&pn));
    Checkpoint { config, tensors }
}

/// Rebuilds network, training configuration and state from a checkpoint.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Network, TrainConfig, TrainState)> {
    let mut kv = ck.config.clone();
    let net_cfg = NetworkConfig::take_from(&mut kv)?;
    let cfg = TrainConfig::take_from(&mut kv)?;
    let mut step = 0u64;
    let mut updates = 0u64;
    kv.take("step", &mut step)?;
    kv.take("optimizer_updates", &mut updates)?;
    kv.reject_unknown()?;
    let net = Network::new(net_cfg)?;
    let (pn, bn) = state_names(&net);
    let fetch = |name: &str, like: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = ck
            .tensor(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor '{name}'")))?;
        if t.shape() != like.shape() {
            return Err(Error::shape(
                "load checkpoint",
                format!("'{name}' has shape {:?}, network expects {:?}", t.shape(), like.shape()),
            ));
        }
        Ok(t.clone())
    };
    let template = net.init::<f32>(0);
    let params = pn
        .iter()
        .zip(&template.params)
        .map(|(n, t)| fetch(n, t))
        .collect::<Result<Vec<_>>>()?;
    let buffers = bn
        .iter()
        .zip(&template.buffers)
        .map(|(n, t)| fetch(n, t))
        .collect::<Result<Vec<_>>>()?;
    let mut optimizer = Optimizer::new(&cfg, &params);
    optimizer.restore(&pn, updates, |n| ck.tensor(n).cloned())?;
    let state = TrainState {
        step,
        model: ModelState { params, buffers },
        optimizer,
    };
    Ok((net, cfg, state))
}
