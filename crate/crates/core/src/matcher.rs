//! Concatenation cost volume, two-branch 3D matching and fusion, scale
//! recovery and soft-argmin disparity regression.

use crate::config::{NetworkConfig, PyramidVariant, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{match_spatial, Conv, ConvKind, ConvSpec, Ctx, Post, Registry, Section};
use crate::tensor::{Real, Tensor};

/// Dense disparity prediction of shape `[N,H,W]`, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap<T> {
    pub disparity: Tensor<T>,
    pub d_max: usize,
}

/// `[N,C,h,w]` left and right features to a `[N,2C,levels,h,w]` volume.
pub fn build_cost_volume<T: Real>(g: &mut Graph<T>, left: Var, right: Var, levels: usize) -> Result<Var> {
    g.cost_volume(left, right, levels)
}

/// Expected disparity index under `softmax(-costs)` along the disparity axis,
/// mapping `[N,1,D,H,W]` to `[N,H,W]`.
pub fn soft_argmin<T: Real>(g: &mut Graph<T>, costs: Var) -> Result<Var> {
    let shape = g.shape(costs).to_vec();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(Error::shape("soft_argmin", format!("expected [N,1,D,H,W], got {shape:?}")));
    }
    let neg = g.scale(costs, -T::one());
    let p = g.softmax(neg, 2)?;
    let d = g.expectation(p, 2)?;
    g.reshape(d, &[shape[0], shape[3], shape[4]])
}

fn conv3d(stride: usize, padding: usize) -> ConvKind {
    ConvKind::Conv3d { stride, padding }
}

fn deconv3d(padding: usize) -> ConvKind {
    ConvKind::Deconv3d {
        stride: 2,
        padding,
        output_padding: 1,
    }
}

#[derive(Clone, Debug)]
struct Branch {
    encoder: Vec<Conv>,
    /// Decoder deconvolutions paired with the encoder output they rejoin.
    decoder: Vec<(Conv, usize)>,
}

impl Branch {
    fn new(reg: &mut Registry, bn: bool, name: &str, in_ch: usize, channels: [usize; 4], kernel: usize, plain: bool) -> Self {
        let sec = Section::Matching;
        let pad = kernel / 2;
        let mut encoder = Vec::with_capacity(4);
        let mut prev = in_ch;
        for (i, &out) in channels.iter().enumerate() {
            let stride = if !plain && i % 2 == 1 { 2 } else { 1 };
            encoder.push(Conv::new(
                reg,
                sec,
                bn,
                ConvSpec {
                    name: &format!("{name}.enc{i}"),
                    in_ch: prev,
                    out_ch: out,
                    kernel,
                    kind: conv3d(stride, pad),
                    post: Post::NormRelu,
                },
            ));
            prev = out;
        }
        let mut decoder = Vec::new();
        if !plain {
            for (j, skip) in [(0, 2), (1, 0)] {
                decoder.push((
                    Conv::new(
                        reg,
                        sec,
                        bn,
                        ConvSpec {
                            name: &format!("{name}.dec{j}"),
                            in_ch: prev,
                            out_ch: channels[skip],
                            kernel,
                            kind: deconv3d(pad),
                            post: Post::Norm,
                        },
                    ),
                    skip,
                ));
                prev = channels[skip];
            }
        }
        Branch { encoder, decoder }
    }

    fn out_channels(&self, channels: [usize; 4]) -> usize {
        match self.decoder.last() {
            Some(&(_, skip)) => channels[skip],
            None => channels[3],
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, volume: Var) -> Result<Var> {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut x = volume;
        for conv in &self.encoder {
            x = conv.forward(ctx, x)?;
            feats.push(x);
        }
        for (deconv, skip) in &self.decoder {
            let up = deconv.forward(ctx, x)?;
            let target = ctx.graph.shape(feats[*skip])[2..].to_vec();
            let up = match_spatial(ctx.graph, up, &target)?;
            let sum = ctx.graph.add(up, feats[*skip])?;
            x = ctx.graph.relu(sum);
        }
        Ok(x)
    }
}

/// Multi-scale 3D matching network with scale recovery to full resolution.
#[derive(Clone, Debug)]
pub struct MatchingFusion {
    branches: Vec<Branch>,
    fuse: Conv,
    recovery: Vec<Conv>,
    head: Conv,
    d_max: usize,
}

/// Number of stride-2 stages in the scale recovery.
const RECOVERY_STAGES: usize = 3;

impl MatchingFusion {
    pub fn new(reg: &mut Registry, cfg: &NetworkConfig, feature_channels: usize) -> Self {
        let bn = cfg.use_batchnorm;
        let plain = cfg.pyramid_variant == PyramidVariant::Plain3d;
        let kernels: &[usize] = if plain { &cfg.kernel_pair[..1] } else { &cfg.kernel_pair };
        let branches: Vec<Branch> = kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let k = if plain { 3 } else { k };
                Branch::new(
                    reg,
                    bn,
                    &format!("matching.branch{i}"),
                    2 * feature_channels,
                    cfg.matcher_channels,
                    k,
                    plain,
                )
            })
            .collect();
        let fused_in: usize = branches.iter().map(|b| b.out_channels(cfg.matcher_channels)).sum();
        let fuse = Conv::new(
            reg,
            Section::Matching,
            bn,
            ConvSpec {
                name: "matching.fuse",
                in_ch: fused_in,
                out_ch: 2,
                kernel: 3,
                kind: conv3d(1, 1),
                post: Post::NormRelu,
            },
        );
        let recovery = (0..RECOVERY_STAGES)
            .map(|i| {
                Conv::new(
                    reg,
                    Section::Recovery,
                    bn,
                    ConvSpec {
                        name: &format!("recovery.up{i}"),
                        in_ch: 2,
                        out_ch: 2,
                        kernel: 3,
                        kind: deconv3d(1),
                        post: Post::NormRelu,
                    },
                )
            })
            .collect();
        let head = Conv::new(
            reg,
            Section::Recovery,
            bn,
            ConvSpec {
                name: "recovery.head",
                in_ch: 2,
                out_ch: 1,
                kernel: 3,
                kind: conv3d(1, 1),
                post: Post::Linear,
            },
        );
        MatchingFusion {
            branches,
            fuse,
            recovery,
            head,
            d_max: cfg.d_max,
        }
    }

    /// `[N,2C,D/8,h,w]` volume to `[N,1,D,8h,8w]` costs.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, volume: Var) -> Result<Var> {
        let shape = ctx.graph.shape(volume).to_vec();
        if shape.len() != 5 {
            return Err(Error::shape(
                "matching_fusion_forward",
                format!("expected [N,2C,D,h,w], got {shape:?}"),
            ));
        }
        if shape[2] * DOWNSAMPLE != self.d_max {
            return Err(Error::shape(
                "matching_fusion_forward",
                format!("volume has {} levels but d_max {} needs {}", shape[2], self.d_max, self.d_max / DOWNSAMPLE),
            ));
        }
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(ctx, volume))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 { outs[0] } else { ctx.graph.concat(&outs, 1)? };
        let mut x = self.fuse.forward(ctx, cat)?;
        for up in &self.recovery {
            x = up.forward(ctx, x)?;
        }
        let costs = self.head.forward(ctx, x)?;
        let target = [self.d_max, shape[3] * DOWNSAMPLE, shape[4] * DOWNSAMPLE];
        match_spatial(ctx.graph, costs, &target)
    }
}
