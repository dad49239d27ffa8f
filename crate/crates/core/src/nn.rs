//! Parameter registry, model state and the conv(+norm)(+relu) layer used by
//! every network stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::norm::{BatchStats, NormMode};
use crate::ops::ConvGeom;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

impl BufferId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Top-level section a parameter belongs to, for the summary report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Section {
    FeatureExtraction,
    Pyramid,
    Matching,
    Recovery,
}

impl Section {
    pub const ALL: [Section; 4] = [
        Section::FeatureExtraction,
        Section::Pyramid,
        Section::Matching,
        Section::Recovery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Section::FeatureExtraction => "feature_extraction",
            Section::Pyramid => "pyramid",
            Section::Matching => "matching_fusion",
            Section::Recovery => "scale_recovery",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub section: Section,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug)]
pub struct BufferInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: f64,
}

/// Names, shapes and initializers of every trainable tensor and buffer.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    params: Vec<ParamInfo>,
    buffers: Vec<BufferInfo>,
}

impl Registry {
    pub fn param(&mut self, name: String, shape: Vec<usize>, init: Init, section: Section) -> ParamId {
        self.params.push(ParamInfo {
            name,
            shape,
            init,
            section,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn buffer(&mut self, name: String, shape: Vec<usize>, init: f64) -> BufferId {
        self.buffers.push(BufferInfo { name, shape, init });
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[ParamInfo] {
        &self.params
    }

    pub fn buffers(&self) -> &[BufferInfo] {
        &self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamInfo::numel).sum()
    }

    /// Deterministic initialization from `seed`.
    pub fn init_state<T: Real>(&self, seed: u64) -> ModelState<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .params
            .iter()
            .map(|p| match p.init {
                Init::Kaiming { fan_in } => Tensor::randn(p.shape.clone(), (2.0 / fan_in as f64).sqrt(), &mut rng),
                Init::Const(v) => Tensor::full(p.shape.clone(), T::of(v)),
            })
            .collect();
        let buffers = self
            .buffers
            .iter()
            .map(|b| Tensor::full(b.shape.clone(), T::of(b.init)))
            .collect();
        ModelState { params, buffers }
    }
}

/// Parameter and buffer values, indexed like the [`Registry`] that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T> {
    pub params: Vec<Tensor<T>>,
    pub buffers: Vec<Tensor<T>>,
}

impl<T: Real> ModelState<T> {
    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0]
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(Tensor::all_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: the graph, parameter bindings and collected
/// normalization statistics.
pub struct Ctx<'a, T> {
    pub graph: &'a mut Graph<T>,
    params: Vec<Var>,
    buffers: &'a [Tensor<T>],
    pub mode: Mode,
    eps: f64,
    /// Training-mode statistics, to be folded into the running buffers.
    pub stats: Vec<(BufferId, BufferId, BatchStats<T>)>,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// Binds every parameter of `state` as a graph leaf. Leaves are
    /// differentiable when `trainable` is set.
    pub fn bind(graph: &'a mut Graph<T>, state: &'a ModelState<T>, mode: Mode, eps: f64, trainable: bool) -> Self {
        let params = state
            .params
            .iter()
            .map(|t| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Ctx {
            graph,
            params,
            buffers: &state.buffers,
            mode,
            eps,
            stats: Vec::new(),
        }
    }

    /// Uses already-bound parameter leaves (for finite-difference checks).
    pub fn with_vars(graph: &'a mut Graph<T>, params: Vec<Var>, buffers: &'a [Tensor<T>], mode: Mode, eps: f64) -> Self {
        Ctx {
            graph,
            params,
            buffers,
            mode,
            eps,
            stats: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }
}

/// Folds collected batch statistics into the running buffers.
pub fn apply_stats<T: Real>(state: &mut ModelState<T>, stats: &[(BufferId, BufferId, BatchStats<T>)]) {
    for (mean, var, s) in stats {
        let (lo, hi) = (mean.0.min(var.0), mean.0.max(var.0));
        let (a, b) = state.buffers.split_at_mut(hi);
        let (m, v) = if mean.0 < var.0 { (&mut a[lo], &mut b[0]) } else { (&mut b[0], &mut a[lo]) };
        s.update_running(m.data_mut(), v.data_mut());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv2d { stride: usize, padding: usize, dilation: usize },
    Conv3d { stride: usize, padding: usize },
    Deconv3d { stride: usize, padding: usize, output_padding: usize },
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

/// Convolution with optional batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    norm: Option<Norm>,
    kind: ConvKind,
    relu: bool,
}

/// What follows the convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Post {
    /// Batch norm (or a bias when normalization is disabled), then ReLU.
    NormRelu,
    /// Batch norm (or a bias when normalization is disabled), no activation.
    Norm,
    /// Bias then ReLU, never normalized.
    BiasRelu,
    /// Bias only.
    Bias,
    /// Plain linear map.
    Linear,
}

pub struct ConvSpec<'a> {
    pub name: &'a str,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub kind: ConvKind,
    pub post: Post,
}

impl Conv {
    pub fn new(reg: &mut Registry, section: Section, use_batchnorm: bool, spec: ConvSpec<'_>) -> Self {
        let ConvSpec {
            name,
            in_ch,
            out_ch,
            kernel,
            kind,
            post,
        } = spec;
        let (shape, fan_in) = match kind {
            ConvKind::Conv2d { .. } => (vec![out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel),
            ConvKind::Conv3d { .. } => (vec![out_ch, in_ch, kernel, kernel, kernel], in_ch * kernel.pow(3)),
            ConvKind::Deconv3d { .. } => (vec![in_ch, out_ch, kernel, kernel, kernel], out_ch * kernel.pow(3)),
        };
        let weight = reg.param(format!("{name}.weight"), shape, Init::Kaiming { fan_in }, section);
        let normed = use_batchnorm && matches!(post, Post::NormRelu | Post::Norm);
        let wants_bias = !normed && !matches!(post, Post::Linear);
        let bias = wants_bias.then(|| reg.param(format!("{name}.bias"), vec![out_ch], Init::Const(0.0), section));
        let norm = normed.then(|| Norm {
            gamma: reg.param(format!("{name}.bn.gamma"), vec![out_ch], Init::Const(1.0), section),
            beta: reg.param(format!("{name}.bn.beta"), vec![out_ch], Init::Const(0.0), section),
            mean: reg.buffer(format!("{name}.bn.running_mean"), vec![out_ch], 0.0),
            var: reg.buffer(format!("{name}.bn.running_var"), vec![out_ch], 1.0),
        });
        Conv {
            weight,
            bias,
            norm,
            kind,
            relu: matches!(post, Post::NormRelu | Post::BiasRelu),
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        let g = &mut *ctx.graph;
        let mut y = match self.kind {
            ConvKind::Conv2d {
                stride,
                padding,
                dilation,
            } => g.conv2d(x, w, b, stride, padding, dilation)?,
            ConvKind::Conv3d { stride, padding } => g.conv3d(x, w, b, stride, padding)?,
            ConvKind::Deconv3d {
                stride,
                padding,
                output_padding,
            } => g.deconv3d(x, w, b, stride, padding, output_padding)?,
        };
        if let Some(n) = &self.norm {
            let (gamma, beta) = (ctx.var(n.gamma), ctx.var(n.beta));
            let mode = match ctx.mode {
                Mode::Train => NormMode::Train,
                Mode::Eval => NormMode::Eval {
                    mean: ctx.buffers[n.mean.0].data(),
                    var: ctx.buffers[n.var.0].data(),
                },
            };
            let (out, stats) = ctx.graph.batch_norm(y, gamma, beta, ctx.eps, mode)?;
            if let Some(s) = stats {
                ctx.stats.push((n.mean, n.var, s));
            }
            y = out;
        }
        if self.relu {
            y = ctx.graph.relu(y);
        }
        Ok(y)
    }

    /// Geometry of the underlying convolution.
    pub fn geom(&self, kernel: usize) -> ConvGeom {
        match self.kind {
            ConvKind::Conv2d {
                stride,
                padding,
                dilation,
            } => ConvGeom::conv2d(kernel, kernel, stride, padding, dilation),
            ConvKind::Conv3d { stride, padding } => ConvGeom::cube(kernel, stride, padding),
            ConvKind::Deconv3d {
                stride,
                padding,
                output_padding,
            } => ConvGeom::cube(kernel, stride, padding).with_output_padding(output_padding),
        }
    }
}

/// Crops the trailing spatial axes of `x` to `target`'s extents, or resamples
/// when `x` is smaller along some axis.
pub fn match_spatial<T: Real>(g: &mut Graph<T>, x: Var, target: &[usize]) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let rank = shape.len();
    let first = rank - target.len();
    if shape[first..] == *target {
        return Ok(x);
    }
    if shape[first..].iter().zip(target).all(|(&s, &t)| s >= t) {
        let mut sizes = shape.clone();
        sizes[first..].copy_from_slice(target);
        return g.slice(x, &vec![0; rank], &sizes);
    }
    if shape[first..].iter().zip(target).all(|(&s, &t)| s <= t) {
        return g.interpolate(x, target);
    }
    Err(Error::shape(
        "match_spatial",
        format!("cannot reconcile {shape:?} with target extents {target:?}"),
    ))
}
