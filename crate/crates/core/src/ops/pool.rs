//! Average pooling over explicit rectangular bins.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{Real, Tensor};

/// Half-open source ranges, one per output cell along an axis.
pub type Bins = Vec<(usize, usize)>;

/// Fixed windows of `window` elements; the last window is truncated to the remainder.
pub fn window_bins(len: usize, window: usize) -> Bins {
    (0..len.div_ceil(window))
        .map(|i| (i * window, ((i + 1) * window).min(len)))
        .collect()
}

/// `cells` bins covering `len` elements with the floor/ceil boundary rule.
pub fn adaptive_bins(len: usize, cells: usize) -> Bins {
    (0..cells)
        .map(|i| ((i * len) / cells, ((i + 1) * len).div_ceil(cells)))
        .collect()
}

#[derive(Clone, Debug)]
pub(crate) struct PoolRecord {
    pub input: Var,
    pub rows: Bins,
    pub cols: Bins,
}

fn bin_mean<T: Real>(plane: &[T], width: usize, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> T {
    // Offsets from the first element keep constant fields exactly constant.
    let anchor = plane[y0 * width + x0];
    let mut acc = T::zero();
    for y in y0..y1 {
        for &v in &plane[y * width + x0..y * width + x1] {
            acc += v - anchor;
        }
    }
    let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
    anchor + acc / count
}

pub(crate) fn backward<T: Real>(r: &PoolRecord, input_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let planes = input_shape[0] * input_shape[1];
    let (oh, ow) = (r.rows.len(), r.cols.len());
    let mut out = Tensor::zeros(input_shape.to_vec());
    let data = out.data_mut();
    for p in 0..planes {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1)) in r.rows.iter().enumerate() {
            for (ox, &(x0, x1)) in r.cols.iter().enumerate() {
                let count = T::of(((y1 - y0) * (x1 - x0)) as f64);
                let share = g.data()[(p * oh + oy) * ow + ox] / count;
                for y in y0..y1 {
                    plane[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += share);
                }
            }
        }
    }
    out
}

impl<T: Real> Graph<T> {
    /// Non-overlapping `window x window` average pooling. Partial windows at the
    /// bottom/right edges average over their true element count.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::invalid("avg_pool2d", "window must be >= 1"));
        }
        let s = self.pool_shape("avg_pool2d", x)?;
        self.pool_bins(x, window_bins(s.0, window), window_bins(s.1, window))
    }

    /// Average pooling onto an `out_h x out_w` grid.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w) = self.pool_shape("adaptive_avg_pool2d", x)?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::invalid(
                "adaptive_avg_pool2d",
                format!("grid {out_h}x{out_w} must be within 1..={h}x{w}"),
            ));
        }
        self.pool_bins(x, adaptive_bins(h, out_h), adaptive_bins(w, out_w))
    }

    fn pool_shape(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        match *self.shape(x) {
            [_, _, h, w] => Ok((h, w)),
            ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
        }
    }

    fn pool_bins(&mut self, x: Var, rows: Bins, cols: Bins) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (h, w) = (shape[2], shape[3]);
        let planes = shape[0] * shape[1];
        let (oh, ow) = (rows.len(), cols.len());
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for &ry in &rows {
                for &rx in &cols {
                    out.push(bin_mean(plane, w, ry, rx));
                }
            }
        }
        let value = Tensor::from_parts(vec![shape[0], shape[1], oh, ow], out);
        Ok(self.push(value, Op::Pool(PoolRecord { input: x, rows, cols })))
    }
}
