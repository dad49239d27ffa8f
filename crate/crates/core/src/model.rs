//! The assembled network: shared 2D features for both views, cost volume,
//! 3D matching and disparity regression.

use std::fmt;

use crate::backbone::{pad_to_multiple, Lfe, Pyramid};
use crate::config::{NetworkConfig, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::matcher::{build_cost_volume, soft_argmin, DisparityMap, MatchingFusion};
use crate::nn::{Ctx, ModelState, Mode, Registry, Section};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    registry: Registry,
    lfe: Lfe,
    pyramid: Pyramid,
    matcher: MatchingFusion,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut registry = Registry::default();
        let lfe = Lfe::new(&mut registry, &config);
        let pyramid = Pyramid::new(&mut registry, &config, lfe.out_channels());
        let matcher = MatchingFusion::new(&mut registry, &config, config.fusion_channels);
        Ok(Network {
            config,
            registry,
            lfe,
            pyramid,
            matcher,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn lfe(&self) -> &Lfe {
        &self.lfe
    }

    pub fn pyramid(&self) -> &Pyramid {
        &self.pyramid
    }

    pub fn init<T: Real>(&self, seed: u64) -> ModelState<T> {
        self.registry.init_state(seed)
    }

    /// Binds `state` on `g` for a forward pass.
    pub fn bind<'a, T: Real>(&self, g: &'a mut Graph<T>, state: &'a ModelState<T>, mode: Mode, trainable: bool) -> Ctx<'a, T> {
        Ctx::bind(g, state, mode, self.config.bn_eps, trainable)
    }

    /// 2D features of a `[N,3,H,W]` batch (extents divisible by 8).
    pub fn features<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let f = self.lfe.forward(ctx, images)?;
        self.pyramid.forward(ctx, f)
    }

    /// Disparity `[N,H,W]` for `[N,3,H,W]` image pairs of any extent. Both
    /// views run through the feature network as one batch.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<Var> {
        if left.shape() != right.shape() {
            return Err(Error::shape(
                "full_forward",
                format!("left {:?} and right {:?} differ", left.shape(), right.shape()),
            ));
        }
        if left.ndim() != 4 || left.shape()[1] != 3 {
            return Err(Error::shape("full_forward", format!("expected [N,3,H,W], got {:?}", left.shape())));
        }
        let (pl, (h, w)) = pad_to_multiple(left, DOWNSAMPLE)?;
        let (pr, _) = pad_to_multiple(right, DOWNSAMPLE)?;
        let n = pl.shape()[0];
        let l = ctx.graph.constant(pl);
        let r = ctx.graph.constant(pr);
        let both = ctx.graph.concat(&[l, r], 0)?;
        let feats = self.features(ctx, both)?;
        let fshape = ctx.graph.shape(feats).to_vec();
        let mut half = fshape.clone();
        half[0] = n;
        let fl = ctx.graph.slice(feats, &[0, 0, 0, 0], &half)?;
        let fr = ctx.graph.slice(feats, &[n, 0, 0, 0], &half)?;
        let volume = build_cost_volume(ctx.graph, fl, fr, self.config.disparity_levels())?;
        let costs = self.matcher.forward(ctx, volume)?;
        let disp = soft_argmin(ctx.graph, costs)?;
        let full = ctx.graph.shape(disp).to_vec();
        if (full[1], full[2]) == (h, w) {
            return Ok(disp);
        }
        ctx.graph.slice(disp, &[0, 0, 0], &[n, h, w])
    }

    /// Inference with running normalization statistics.
    pub fn predict<T: Real>(&self, state: &ModelState<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<DisparityMap<T>> {
        let mut g = Graph::new();
        let mut ctx = self.bind(&mut g, state, Mode::Eval, false);
        let d = self.forward(&mut ctx, left, right)?;
        Ok(DisparityMap {
            disparity: g.value(d).clone(),
            d_max: self.config.d_max,
        })
    }

    pub fn summary(&self) -> Summary {
        let mut sections: Vec<(Section, usize)> = Section::ALL.iter().map(|&s| (s, 0)).collect();
        for p in self.registry.params() {
            if let Some(e) = sections.iter_mut().find(|(s, _)| *s == p.section) {
                e.1 += p.numel();
            }
        }
        Summary {
            variant: self.config.pyramid_variant.name(),
            sections,
            tensors: self.registry.params().len(),
            main_path_convs: self.lfe.main_path_convs(),
            feature_convs: self.lfe.total_convs(),
        }
    }
}

/// Parameter counts per section.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Summary {
    pub variant: &'static str,
    pub sections: Vec<(Section, usize)>,
    pub tensors: usize,
    pub main_path_convs: usize,
    pub feature_convs: usize,
}

impl Summary {
    pub fn total(&self) -> usize {
        self.sections.iter().map(|(_, n)| n).sum()
    }

    pub fn section(&self, s: Section) -> usize {
        self.sections.iter().find(|(x, _)| *x == s).map_or(0, |(_, n)| *n)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant = {}", self.variant)?;
        for (s, n) in &self.sections {
            writeln!(f, "{} = {n}", s.name())?;
        }
        writeln!(f, "parameter_tensors = {}", self.tensors)?;
        writeln!(f, "feature_main_path_convs = {}", self.main_path_convs)?;
        writeln!(f, "feature_convs_with_shortcuts = {}", self.feature_convs)?;
        writeln!(f, "total = {}", self.total())?;
        write!(f, "total_millions = {:.3}", self.total() as f64 / 1e6)
    }
}
