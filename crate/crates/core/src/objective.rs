//! Training loss and disparity evaluation metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub use crate::ops::{smooth_l1, smooth_l1_grad};

/// One rectified stereo pair with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    /// `[H,W]` disparity in pixels.
    pub gt: Tensor<f32>,
    pub valid: Vec<bool>,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.gt.shape()[1]
    }

    /// Valid pixels whose ground truth the regression can represent.
    pub fn training_mask(&self, d_max: usize) -> Vec<bool> {
        training_mask(self.gt.data(), &self.valid, d_max)
    }

    /// Left and right images as `[1,3,H,W]` batches.
    pub fn batch<T: Real>(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let shape = [1, 3, self.height(), self.width()];
        Ok((self.left.cast().reshape(shape)?, self.right.cast().reshape(shape)?))
    }
}

/// `valid && 0 < gt < d_max`.
pub fn training_mask(gt: &[f32], valid: &[bool], d_max: usize) -> Vec<bool> {
    gt.iter()
        .zip(valid)
        .map(|(&g, &v)| v && g > 0.0 && g < d_max as f32)
        .collect()
}

/// Mean smooth-L1 residual of `pred` against `gt` over `mask`.
pub fn loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, mask: &[bool]) -> Result<Var> {
    g.smooth_l1_loss(pred, gt, mask)
}

fn check_lengths(op: &'static str, pred: usize, gt: usize, mask: usize) -> Result<()> {
    if pred != gt || gt != mask {
        return Err(Error::shape(op, format!("pred {pred}, gt {gt} and mask {mask} lengths differ")));
    }
    Ok(())
}

fn valid_errors<'a, T: Real>(pred: &'a [T], gt: &'a [T], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.iter()
        .zip(gt)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| ((p - g).f64().abs(), g.f64()))
}

/// Mean absolute disparity error over `mask`.
pub fn epe<T: Real>(pred: &[T], gt: &[T], mask: &[bool]) -> Result<f64> {
    check_lengths("epe", pred.len(), gt.len(), mask.len())?;
    let (sum, n) = valid_errors(pred, gt, mask).fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    if n == 0 {
        return Err(Error::Degenerate {
            what: "epe",
            detail: "mask selects no pixels".into(),
        });
    }
    Ok(sum / n as f64)
}

/// Fraction of masked pixels with `|pred - gt| > threshold`.
pub fn bad_pixel_rate<T: Real>(pred: &[T], gt: &[T], mask: &[bool], threshold: f64) -> Result<f64> {
    check_lengths("bad_pixel_rate", pred.len(), gt.len(), mask.len())?;
    if !(threshold > 0.0) {
        return Err(Error::invalid("bad_pixel_rate", format!("threshold {threshold} must be positive")));
    }
    let (bad, n) = valid_errors(pred, gt, mask).fold((0usize, 0usize), |(b, n), (e, _)| (b + usize::from(e > threshold), n + 1));
    if n == 0 {
        return Err(Error::Degenerate {
            what: "bad_pixel_rate",
            detail: "mask selects no pixels".into(),
        });
    }
    Ok(bad as f64 / n as f64)
}

/// Whether an error counts as a D1 outlier: above 3 px and above 5% of the
/// true disparity.
pub fn is_d1_error(err: f64, gt: f64) -> bool {
    err > 3.0 && err > 0.05 * gt.abs()
}

/// D1 outlier rate per region; a region without valid pixels is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct D1 {
    pub bg: Option<f64>,
    pub fg: Option<f64>,
    pub all: Option<f64>,
}

pub fn d1_metrics<T: Real>(pred: &[T], gt: &[T], fg_mask: &[bool], valid: &[bool]) -> Result<D1> {
    check_lengths("d1_metrics", pred.len(), gt.len(), valid.len())?;
    if fg_mask.len() != valid.len() {
        return Err(Error::shape(
            "d1_metrics",
            format!("foreground mask has {} entries, valid mask {}", fg_mask.len(), valid.len()),
        ));
    }
    let mut counts = [[0usize; 2]; 2];
    for (((&p, &g), &fg), &v) in pred.iter().zip(gt).zip(fg_mask).zip(valid) {
        if v {
            let c = &mut counts[usize::from(fg)];
            c[0] += usize::from(is_d1_error((p - g).f64().abs(), g.f64()));
            c[1] += 1;
        }
    }
    let rate = |[bad, n]: [usize; 2]| (n > 0).then(|| bad as f64 / n as f64);
    Ok(D1 {
        bg: rate(counts[0]),
        fg: rate(counts[1]),
        all: rate([counts[0][0] + counts[1][0], counts[0][1] + counts[1][1]]),
    })
}

pub const BAD_THRESHOLDS: [u32; 4] = [1, 3, 4, 5];

/// Evaluation summary for one prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub epe: f64,
    /// `(threshold px, rate)` for each of [`BAD_THRESHOLDS`].
    pub bad: Vec<(u32, f64)>,
    pub d1: D1,
    pub valid_pixels: usize,
    pub fg_pixels: usize,
    pub bg_pixels: usize,
}

impl MetricReport {
    /// Metrics over `valid`; without a foreground mask every pixel is
    /// background.
    pub fn evaluate<T: Real>(pred: &[T], gt: &[T], valid: &[bool], fg: Option<&[bool]>) -> Result<Self> {
        let none = vec![false; valid.len()];
        let fg = fg.unwrap_or(&none);
        let epe = epe(pred, gt, valid)?;
        let bad = BAD_THRESHOLDS
            .iter()
            .map(|&k| Ok((k, bad_pixel_rate(pred, gt, valid, k as f64)?)))
            .collect::<Result<_>>()?;
        let d1 = d1_metrics(pred, gt, fg, valid)?;
        let fg_pixels = fg.iter().zip(valid).filter(|(&f, &v)| f && v).count();
        let valid_pixels = valid.iter().filter(|&&v| v).count();
        Ok(MetricReport {
            epe,
            bad,
            d1,
            valid_pixels,
            fg_pixels,
            bg_pixels: valid_pixels - fg_pixels,
        })
    }

    pub fn bad_rate(&self, threshold: u32) -> Option<f64> {
        self.bad.iter().find(|(k, _)| *k == threshold).map(|(_, r)| *r)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epe = {}", self.epe)?;
        for (k, r) in &self.bad {
            writeln!(f, "bad_{k} = {r}")?;
        }
        let region = |r: Option<f64>| r.map_or_else(|| "absent".to_string(), |v| v.to_string());
        writeln!(f, "d1_all = {}", region(self.d1.all))?;
        writeln!(f, "d1_fg = {}", region(self.d1.fg))?;
        writeln!(f, "d1_bg = {}", region(self.d1.bg))?;
        writeln!(f, "valid_pixels = {}", self.valid_pixels)?;
        writeln!(f, "fg_pixels = {}", self.fg_pixels)?;
        write!(f, "bg_pixels = {}", self.bg_pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bad_pixel_example() {
        let r = bad_pixel_rate(&[1.0f64, 5.0, 10.0], &[1.0, 1.0, 1.0], &[true; 3], 3.0).unwrap();
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!(bad_pixel_rate(&[1.0f64], &[1.0], &[false], 3.0).is_err());
    }

    #[test]
    fn d1_rule_examples() {
        assert!(!is_d1_error(4.0, 100.0));
        assert!(is_d1_error(4.0, 10.0));
        let d = d1_metrics(&[14.0f64, 104.0], &[10.0, 100.0], &[true, false], &[true, true]).unwrap();
        assert_eq!(d.fg, Some(1.0));
        assert_eq!(d.bg, Some(0.0));
        assert_eq!(d.all, Some(0.5));
        let d = d1_metrics(&[14.0f64], &[10.0], &[false], &[true]).unwrap();
        assert_eq!(d.fg, None);
    }

    #[test]
    fn epe_examples() {
        assert_eq!(epe(&[3.0f32, 4.0], &[3.0, 4.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(epe(&[5.0f32, 6.0], &[3.0, 4.0], &[true, true]).unwrap(), 2.0);
    }

    #[test]
    fn report_lines_are_key_value() {
        let r = MetricReport::evaluate(&[1.0f32, 2.0], &[1.0, 2.0], &[true, true], None).unwrap();
        let text = r.to_string();
        assert!(text.lines().all(|l| l.contains(" = ")));
        assert!(text.contains("d1_fg = absent"));
        assert_eq!(r.bad_rate(3), Some(0.0));
    }

    #[test]
    fn training_mask_filters_range() {
        let m = training_mask(&[0.0, 0.5, 15.9, 16.0], &[true, true, true, true], 16);
        assert_eq!(m, vec![false, true, true, false]);
    }
}
