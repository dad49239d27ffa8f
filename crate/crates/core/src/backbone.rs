//! Per-image 2D features: residual local feature extraction followed by the
//! cross-form context pyramid (or one of its ablations).

use crate::config::{NetworkConfig, PyramidVariant, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{Conv, ConvKind, ConvSpec, Ctx, Post, Registry, Section};
use crate::tensor::{Real, Tensor};

fn conv2d(stride: usize, padding: usize, dilation: usize) -> ConvKind {
    ConvKind::Conv2d {
        stride,
        padding,
        dilation,
    }
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

impl BasicBlock {
    fn new(reg: &mut Registry, bn: bool, name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let s = Section::FeatureExtraction;
        let conv1 = Conv::new(
            reg,
            s,
            bn,
            ConvSpec {
                name: &format!("{name}.conv1"),
                in_ch,
                out_ch,
                kernel: 3,
                kind: conv2d(stride, 1, 1),
                post: Post::NormRelu,
            },
        );
        let conv2 = Conv::new(
            reg,
            s,
            bn,
            ConvSpec {
                name: &format!("{name}.conv2"),
                in_ch: out_ch,
                out_ch,
                kernel: 3,
                kind: conv2d(1, 1, 1),
                post: Post::Norm,
            },
        );
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            Conv::new(
                reg,
                s,
                bn,
                ConvSpec {
                    name: &format!("{name}.shortcut"),
                    in_ch,
                    out_ch,
                    kernel: 1,
                    kind: conv2d(stride, 0, 1),
                    post: Post::Norm,
                },
            )
        });
        BasicBlock { conv1, conv2, shortcut }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.conv2.forward(ctx, y)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.graph.add(y, skip)?;
        Ok(ctx.graph.relu(sum))
    }

    fn conv_count(&self) -> usize {
        2 + usize::from(self.shortcut.is_some())
    }
}

/// Multi-scale local feature extraction: a 3×3 stem and three residual
/// stages, each opening with a stride-2 block.
#[derive(Clone, Debug)]
pub struct Lfe {
    conv0: Conv,
    stages: Vec<Vec<BasicBlock>>,
    out_channels: usize,
}

impl Lfe {
    pub fn new(reg: &mut Registry, cfg: &NetworkConfig) -> Self {
        let bn = cfg.use_batchnorm;
        let conv0 = Conv::new(
            reg,
            Section::FeatureExtraction,
            bn,
            ConvSpec {
                name: "lfe.conv0",
                in_ch: 3,
                out_ch: cfg.base_channels,
                kernel: 3,
                kind: conv2d(1, 1, 1),
                post: Post::NormRelu,
            },
        );
        let mut channels = cfg.base_channels;
        let mut stages = Vec::new();
        for (s, (&count, &out)) in cfg.block_counts.iter().zip(&cfg.stage_channels).enumerate() {
            let blocks: Vec<BasicBlock> = (0..count)
                .map(|b| {
                    let (in_ch, stride) = if b == 0 { (channels, 2) } else { (out, 1) };
                    BasicBlock::new(reg, bn, &format!("lfe.stage{}.block{b}", s + 1), in_ch, out, stride)
                })
                .collect();
            if count > 0 {
                channels = out;
            }
            stages.push(blocks);
        }
        Lfe {
            conv0,
            stages,
            out_channels: channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Convolutions on the main path (stem plus two per block).
    pub fn main_path_convs(&self) -> usize {
        1 + 2 * self.stages.iter().map(Vec::len).sum::<usize>()
    }

    /// All convolutions, projection shortcuts included.
    pub fn total_convs(&self) -> usize {
        1 + self.stages.iter().flatten().map(BasicBlock::conv_count).sum::<usize>()
    }

    /// `[N,3,H,W]` with `H`, `W` divisible by 8 to `[N,C,H/8,W/8]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let shape = ctx.graph.shape(image).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("lfe_forward", format!("expected [N,3,H,W], got {shape:?}")));
        }
        if shape[2] % DOWNSAMPLE != 0 || shape[3] % DOWNSAMPLE != 0 {
            return Err(Error::invalid(
                "lfe_forward",
                format!("extents {}x{} are not multiples of {DOWNSAMPLE}; pad first", shape[2], shape[3]),
            ));
        }
        if let Some(s) = self.stages.iter().position(Vec::is_empty) {
            return Err(Error::Config(format!(
                "stage {} has no blocks, so the features would not be downsampled by {DOWNSAMPLE}",
                s + 1
            )));
        }
        let mut x = self.conv0.forward(ctx, image)?;
        for block in self.stages.iter().flatten() {
            x = block.forward(ctx, x)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct Level {
    pool_size: usize,
    dilated: Option<(Conv, Conv)>,
    pooling: Option<Conv>,
    merge: Option<Conv>,
}

#[derive(Clone, Debug)]
enum PyramidKind {
    Levels { levels: Vec<Level>, fuse: Conv, project: Conv },
    Plain { project: Conv },
}

/// Context aggregation on top of the local features.
#[derive(Clone, Debug)]
pub struct Pyramid {
    kind: PyramidKind,
}

/// Output grid of the pooling branch for pool size `pool` on a feature axis
/// of length `len`.
pub fn pooled_cells(len: usize, pool: usize) -> usize {
    let cells = (len as f64 * DOWNSAMPLE as f64 / pool as f64).round() as usize;
    cells.clamp(1, len)
}

impl Pyramid {
    pub fn new(reg: &mut Registry, cfg: &NetworkConfig, in_ch: usize) -> Self {
        let bn = cfg.use_batchnorm;
        let sec = Section::Pyramid;
        let out = cfg.fusion_channels;
        let branch = cfg.branch_channels;
        let variant = cfg.pyramid_variant;
        if variant == PyramidVariant::PlainLfe {
            let project = Conv::new(
                reg,
                sec,
                bn,
                ConvSpec {
                    name: "pyramid.project",
                    in_ch,
                    out_ch: out,
                    kernel: 1,
                    kind: conv2d(1, 0, 1),
                    post: Post::Linear,
                },
            );
            return Pyramid {
                kind: PyramidKind::Plain { project },
            };
        }
        let both = variant.has_dilated_branches() && variant.has_pooling_branches();
        let levels = cfg
            .pyramid_pool_sizes
            .iter()
            .zip(&cfg.pyramid_dilations)
            .enumerate()
            .map(|(i, (&pool_size, &dilation))| {
                let dilated = variant.has_dilated_branches().then(|| {
                    let a = Conv::new(
                        reg,
                        sec,
                        bn,
                        ConvSpec {
                            name: &format!("pyramid.level{i}.dilated.conv"),
                            in_ch,
                            out_ch: branch,
                            kernel: 3,
                            kind: conv2d(1, dilation, dilation),
                            post: Post::NormRelu,
                        },
                    );
                    let b = Conv::new(
                        reg,
                        sec,
                        bn,
                        ConvSpec {
                            name: &format!("pyramid.level{i}.dilated.out"),
                            in_ch: branch,
                            out_ch: branch,
                            kernel: 1,
                            kind: conv2d(1, 0, 1),
                            post: Post::BiasRelu,
                        },
                    );
                    (a, b)
                });
                let pooling = variant.has_pooling_branches().then(|| {
                    Conv::new(
                        reg,
                        sec,
                        bn,
                        ConvSpec {
                            name: &format!("pyramid.level{i}.pool.out"),
                            in_ch,
                            out_ch: branch,
                            kernel: 1,
                            kind: conv2d(1, 0, 1),
                            post: Post::BiasRelu,
                        },
                    )
                });
                let merge = both.then(|| {
                    Conv::new(
                        reg,
                        sec,
                        bn,
                        ConvSpec {
                            name: &format!("pyramid.level{i}.merge"),
                            in_ch: 2 * branch,
                            out_ch: branch,
                            kernel: 3,
                            kind: conv2d(1, 1, 1),
                            post: Post::NormRelu,
                        },
                    )
                });
                Level {
                    pool_size,
                    dilated,
                    pooling,
                    merge,
                }
            })
            .collect::<Vec<_>>();
        let fuse = Conv::new(
            reg,
            sec,
            bn,
            ConvSpec {
                name: "pyramid.fuse",
                in_ch: levels.len() * branch + in_ch,
                out_ch: cfg.pyramid_hidden,
                kernel: 3,
                kind: conv2d(1, 1, 1),
                post: Post::NormRelu,
            },
        );
        let project = Conv::new(
            reg,
            sec,
            bn,
            ConvSpec {
                name: "pyramid.project",
                in_ch: cfg.pyramid_hidden,
                out_ch: out,
                kernel: 1,
                kind: conv2d(1, 0, 1),
                post: Post::Linear,
            },
        );
        Pyramid {
            kind: PyramidKind::Levels { levels, fuse, project },
        }
    }

    /// The final 1×1 projection to the matching features.
    pub fn projection(&self) -> &Conv {
        match &self.kind {
            PyramidKind::Levels { project, .. } | PyramidKind::Plain { project } => project,
        }
    }

    /// `[N,C,h,w]` to `[N,C_feat,h,w]`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (levels, fuse, project) = match &self.kind {
            PyramidKind::Plain { project } => return project.forward(ctx, x),
            PyramidKind::Levels { levels, fuse, project } => (levels, fuse, project),
        };
        let shape = ctx.graph.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape("cfspp_forward", format!("expected [N,C,h,w], got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let mut parts = Vec::with_capacity(levels.len() + 1);
        for level in levels {
            let mut outs = Vec::with_capacity(2);
            if let Some((a, b)) = &level.dilated {
                let y = a.forward(ctx, x)?;
                outs.push(b.forward(ctx, y)?);
            }
            if let Some(conv) = &level.pooling {
                let (gh, gw) = (pooled_cells(h, level.pool_size), pooled_cells(w, level.pool_size));
                let pooled = ctx.graph.adaptive_avg_pool2d(x, gh, gw)?;
                let y = conv.forward(ctx, pooled)?;
                outs.push(ctx.graph.bilinear_upsample2d(y, h, w)?);
            }
            let out = match &level.merge {
                Some(m) => {
                    let cat = ctx.graph.concat(&outs, 1)?;
                    m.forward(ctx, cat)?
                }
                None => outs[0],
            };
            parts.push(out);
        }
        parts.push(x);
        let cat = ctx.graph.concat(&parts, 1)?;
        let y = fuse.forward(ctx, cat)?;
        project.forward(ctx, y)
    }
}

/// Zero-pads the trailing two axes of `image` on the bottom and right up to
/// the next multiple of `m`, returning the original extents.
pub fn pad_to_multiple<T: Real>(image: &Tensor<T>, m: usize) -> Result<(Tensor<T>, (usize, usize))> {
    if m == 0 {
        return Err(Error::invalid("pad_to_multiple", "multiple must be at least 1"));
    }
    let shape = image.shape();
    if shape.len() < 2 {
        return Err(Error::shape("pad_to_multiple", format!("need at least 2 axes, got {shape:?}")));
    }
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok((image.clone(), (h, w)));
    }
    let outer: usize = shape[..r - 2].iter().product();
    let mut data = vec![T::zero(); outer * ph * pw];
    for (o, plane) in image.data().chunks_exact(h * w).enumerate() {
        for (y, row) in plane.chunks_exact(w).enumerate() {
            let start = (o * ph + y) * pw;
            data[start..start + w].copy_from_slice(row);
        }
    }
    let mut padded = shape.to_vec();
    padded[r - 2] = ph;
    padded[r - 1] = pw;
    Ok((Tensor::new(padded, data)?, (h, w)))
}

/// Keeps the top-left `h`×`w` window of the trailing two axes.
pub fn crop<T: Real>(image: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let shape = image.shape();
    let r = shape.len();
    if r < 2 || h == 0 || w == 0 || h > shape[r - 2] || w > shape[r - 1] {
        return Err(Error::shape("crop", format!("cannot crop {shape:?} to {h}x{w}")));
    }
    let (sh, sw) = (shape[r - 2], shape[r - 1]);
    let mut data = Vec::with_capacity(image.numel() / (sh * sw) * h * w);
    for plane in image.data().chunks_exact(sh * sw) {
        for row in plane.chunks_exact(sw).take(h) {
            data.extend_from_slice(&row[..w]);
        }
    }
    let mut out = shape.to_vec();
    out[r - 2] = h;
    out[r - 1] = w;
    Tensor::new(out, data)
}
