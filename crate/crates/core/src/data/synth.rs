//! Seeded synthetic stereo pairs with exact ground truth.
//!
//! A noise texture wider than the frame serves as the right view. The left
//! view samples it at `x - d(x,y)` with linear interpolation along the row,
//! so sampling the right image at `x - d` reproduces the left pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::StereoSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    RandomNoise,
    /// Noise box-blurred with radius 2, then stretched to `[0,1]`.
    SmoothedNoise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DisparityField {
    Constant(f32),
    /// Linear in `x`, from `from` at the left edge to `to` at the right edge.
    PlanarRamp { from: f32, to: f32 },
    /// Seeded rectangles of constant disparity over a seeded ramp.
    Blocks,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub d_max: usize,
    pub texture: Texture,
    pub field: DisparityField,
    pub seed: u64,
}

pub const MIN_EXTENT: usize = 16;
const BLUR_RADIUS: usize = 2;
/// Minimum depth gap for one surface to hide another.
const OCCLUSION_MARGIN: f32 = 0.5;

impl SyntheticSpec {
    /// Smoothed texture with a field drawn from `seed`: mostly block scenes,
    /// sometimes a single slanted plane.
    pub fn random(width: usize, height: usize, d_max: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5157_4e54);
        let field = if rng.random_bool(0.2) {
            let hi = (d_max.max(2) - 1) as f32;
            DisparityField::PlanarRamp {
                from: rng.random_range(1.0..=hi),
                to: rng.random_range(1.0..=hi),
            }
        } else {
            DisparityField::Blocks
        };
        SyntheticSpec {
            width,
            height,
            d_max,
            texture: Texture::SmoothedNoise,
            field,
            seed,
        }
    }
}

fn in_range(v: f32, d_max: usize) -> bool {
    v.is_finite() && v >= 0.0 && v <= (d_max - 1) as f32
}

fn ramp(width: usize, height: usize, from: f32, to: f32) -> Vec<f32> {
    let span = (width - 1) as f32;
    let row: Vec<f32> = (0..width).map(|x| from + (to - from) * (x as f32 / span)).collect();
    row.repeat(height)
}

fn field_values(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (w, h) = (spec.width, spec.height);
    match spec.field {
        DisparityField::Constant(v) => vec![v; w * h],
        DisparityField::PlanarRamp { from, to } => ramp(w, h, from, to),
        DisparityField::Blocks => {
            let hi = (spec.d_max - 1) as f32;
            let mut d = ramp(w, h, rng.random_range(1.0..=hi), rng.random_range(1.0..=hi));
            for _ in 0..rng.random_range(1..=3) {
                let bw = rng.random_range(w / 6..=w / 2);
                let bh = rng.random_range(h / 4..=(3 * h) / 4);
                let x0 = rng.random_range(0..=w - bw);
                let y0 = rng.random_range(0..=h - bh);
                let v = rng.random_range(1.0..=hi);
                for y in y0..y0 + bh {
                    d[y * w + x0..y * w + x0 + bw].fill(v);
                }
            }
            d
        }
    }
}

/// `[3, h, w]` texture in `[0,1]`.
fn texture(kind: Texture, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let noise: Vec<f32> = (0..3 * w * h).map(|_| rng.random::<f32>()).collect();
    if kind == Texture::RandomNoise {
        return noise;
    }
    let r = BLUR_RADIUS as isize;
    let mut out = vec![0.0f32; noise.len()];
    for (src, dst) in noise.chunks_exact(w * h).zip(out.chunks_exact_mut(w * h)) {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut sum, mut n) = (0.0f32, 0u32);
                for yy in (y - r).max(0)..(y + r + 1).min(h as isize) {
                    for xx in (x - r).max(0)..(x + r + 1).min(w as isize) {
                        sum += src[yy as usize * w + xx as usize];
                        n += 1;
                    }
                }
                dst[y as usize * w + x as usize] = sum / n as f32;
            }
        }
        let lo = dst.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = dst.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(f32::EPSILON);
        for v in dst.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
    out
}

/// Linear interpolation of `row` at position `u`.
pub fn sample_row(row: &[f32], u: f64) -> f32 {
    let lo = u.floor();
    let t = u - lo;
    let i = lo as usize;
    if t == 0.0 {
        return row[i];
    }
    let a = row[i] as f64;
    let b = row[i + 1] as f64;
    (a + t * (b - a)) as f32
}

/// Left pixels hidden in the right view, by forward-warping every pixel of a
/// row onto the integer grid it touches and keeping the nearest surface.
fn occlusion(d: &[f32], w: usize, h: usize, pad: usize) -> Vec<bool> {
    let mut occluded = vec![false; w * h];
    let mut zbuf = vec![f32::NEG_INFINITY; w + pad + 1];
    for y in 0..h {
        zbuf.fill(f32::NEG_INFINITY);
        let row = &d[y * w..(y + 1) * w];
        let bins = |x: usize| {
            let u = (pad + x) as f64 - row[x] as f64;
            let b = u.floor() as usize;
            [b, b + 1]
        };
        for x in 0..w {
            for b in bins(x) {
                zbuf[b] = zbuf[b].max(row[x]);
            }
        }
        for x in 0..w {
            let front = bins(x).iter().map(|&b| zbuf[b]).fold(f32::NEG_INFINITY, f32::max);
            occluded[y * w + x] = front > row[x] + OCCLUSION_MARGIN;
        }
    }
    occluded
}

/// Deterministic stereo pair for `spec`.
pub fn generate_sample(spec: &SyntheticSpec) -> Result<StereoSample> {
    let (w, h) = (spec.width, spec.height);
    if w < MIN_EXTENT || h < MIN_EXTENT {
        return Err(Error::invalid(
            "generate_sample",
            format!("extent {h}x{w} is below the {MIN_EXTENT}x{MIN_EXTENT} minimum"),
        ));
    }
    if spec.d_max < 2 {
        return Err(Error::invalid("generate_sample", format!("d_max {} must be at least 2", spec.d_max)));
    }
    let bad = match spec.field {
        DisparityField::Constant(v) => !in_range(v, spec.d_max),
        DisparityField::PlanarRamp { from, to } => !in_range(from, spec.d_max) || !in_range(to, spec.d_max),
        DisparityField::Blocks => false,
    };
    if bad {
        return Err(Error::invalid(
            "generate_sample",
            format!("{:?} leaves the range [0, {}]", spec.field, spec.d_max - 1),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = field_values(spec, &mut rng);
    let pad = spec.d_max;
    let tw = w + pad;
    let tex = texture(spec.texture, tw, h, &mut rng);
    let plane = w * h;
    let mut left = vec![0.0f32; 3 * plane];
    let mut right = vec![0.0f32; 3 * plane];
    for c in 0..3 {
        for y in 0..h {
            let row = &tex[(c * h + y) * tw..(c * h + y + 1) * tw];
            for x in 0..w {
                let i = y * w + x;
                right[c * plane + i] = row[pad + x];
                left[c * plane + i] = sample_row(row, (pad + x) as f64 - d[i] as f64);
            }
        }
    }
    let occluded = occlusion(&d, w, h, pad);
    let valid = (0..plane)
        .map(|i| (i % w) as f64 - d[i] as f64 >= 0.0 && !occluded[i])
        .collect();
    Ok(StereoSample {
        left: Tensor::new(vec![3, h, w], left)?,
        right: Tensor::new(vec![3, h, w], right)?,
        gt: Tensor::new(vec![h, w], d)?,
        valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(field: DisparityField) -> SyntheticSpec {
        SyntheticSpec {
            width: 32,
            height: 16,
            d_max: 16,
            texture: Texture::SmoothedNoise,
            field,
            seed: 3,
        }
    }

    #[test]
    fn integer_shift_is_exact() {
        let s = generate_sample(&spec(DisparityField::Constant(4.0))).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..28 {
                    assert_eq!(s.right.at(&[c, y, x]), s.left.at(&[c, y, x + 4]));
                }
            }
        }
        assert!(s.valid[4] && !s.valid[3]);
    }

    #[test]
    fn zero_disparity_is_identity() {
        let s = generate_sample(&spec(DisparityField::Constant(0.0))).unwrap();
        assert_eq!(s.left, s.right);
        assert!(s.valid.iter().all(|&v| v));
    }

    #[test]
    fn rejects_out_of_range_fields() {
        assert!(generate_sample(&spec(DisparityField::Constant(15.5))).is_err());
        assert!(generate_sample(&spec(DisparityField::PlanarRamp { from: 1.0, to: -1.0 })).is_err());
        let mut s = spec(DisparityField::Blocks);
        s.width = 8;
        assert!(generate_sample(&s).is_err());
    }

    #[test]
    fn blocks_occlude_the_background() {
        let s = generate_sample(&spec(DisparityField::Blocks)).unwrap();
        let g = s.gt.data();
        assert!(g.iter().all(|&d| (1.0..=15.0).contains(&d)));
        let hidden = (0..g.len()).filter(|&i| !s.valid[i] && (i % 32) as f32 >= g[i]).count();
        let edges = (0..g.len()).filter(|&i| i % 32 > 0 && (g[i] - g[i - 1]).abs() > 1.0).count();
        assert!(edges == 0 || hidden > 0);
    }
}
