//! 2D/3D convolution and 3D transposed convolution via im2col + GEMM.
//!
//! Both ranks share one volumetric kernel: a 2D problem is a 3D problem
//! with depth 1 and a depth-1 kernel.

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::{matmul, MatRef, Real, Tensor};

/// Per-axis geometry in (depth, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    /// Extra trailing output extent for transposed convolution.
    pub output_padding: [usize; 3],
}

impl ConvGeom {
    pub fn conv2d(kh: usize, kw: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeom {
            kernel: [1, kh, kw],
            stride: [1, stride, stride],
            padding: [0, padding, padding],
            dilation: [1, dilation, dilation],
            output_padding: [0; 3],
        }
    }

    pub fn cube(k: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            dilation: [1; 3],
            output_padding: [0; 3],
        }
    }

    pub fn with_output_padding(mut self, op: usize) -> Self {
        self.output_padding = [op; 3];
        self
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || self.dilation[a] == 0 {
                return Err(Error::invalid(
                    op,
                    format!("kernel, stride and dilation must be >= 1, got {self:?}"),
                ));
            }
        }
        Ok(())
    }

    /// Forward-convolution output extents for the given input extents.
    pub fn conv_output(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let extent = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = input[a] + 2 * self.padding[a];
            if padded < extent {
                return None;
            }
            out[a] = (padded - extent) / self.stride[a] + 1;
        }
        Some(out)
    }

    /// Transposed-convolution output extents for the given input extents.
    pub fn transposed_output(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let extent = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let size = (input[a] as isize - 1) * self.stride[a] as isize + extent as isize
                - 2 * self.padding[a] as isize
                + self.output_padding[a] as isize;
            if size <= 0 {
                return None;
            }
            out[a] = size as usize;
        }
        Some(out)
    }
}

/// Range of output positions whose source index `o * stride + offset` lies in `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Spatial layout shared by im2col and col2im: `image` is the padded side,
/// `cols` the strided side.
struct Lowering<'g> {
    geom: &'g ConvGeom,
    image: [usize; 3],
    cols: [usize; 3],
}

impl Lowering<'_> {
    fn col_len(&self) -> usize {
        self.cols.iter().product()
    }

    fn image_len(&self) -> usize {
        self.image.iter().product()
    }

    /// Calls `f(col_offset, image_offset, lo, hi)` for every run of valid taps along
    /// the width axis: columns `col_offset + lo..col_offset + hi` read image
    /// elements `image_offset + (ox - lo) * stride`.
    fn for_each_run(&self, channels: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let g = self.geom;
        let [cd, ch, cw] = self.cols;
        let [id, ih, iw] = self.image;
        let [kd, kh, kw] = g.kernel;
        let p = self.col_len();
        for c in 0..channels {
            for kz in 0..kd {
                let off_z = (kz * g.dilation[0]) as isize - g.padding[0] as isize;
                let (z_lo, z_hi) = valid_range(cd, id, g.stride[0], off_z);
                for ky in 0..kh {
                    let off_y = (ky * g.dilation[1]) as isize - g.padding[1] as isize;
                    let (y_lo, y_hi) = valid_range(ch, ih, g.stride[1], off_y);
                    for kx in 0..kw {
                        let off_x = (kx * g.dilation[2]) as isize - g.padding[2] as isize;
                        let (x_lo, x_hi) = valid_range(cw, iw, g.stride[2], off_x);
                        let row = ((c * kd + kz) * kh + ky) * kw + kx;
                        if x_lo >= x_hi {
                            continue;
                        }
                        for oz in z_lo..z_hi {
                            let iz = (oz * g.stride[0]) as isize + off_z;
                            for oy in y_lo..y_hi {
                                let iy = (oy * g.stride[1]) as isize + off_y;
                                let col = row * p + (oz * ch + oy) * cw;
                                let base = ((c * id) + iz as usize) * ih * iw + iy as usize * iw;
                                let img = base as isize + (x_lo * g.stride[2]) as isize + off_x;
                                f(col, img as usize, x_lo, x_hi);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `cols[(c, taps), positions]` from an image of `channels` planes.
    fn im2col<T: Real>(&self, channels: usize, image: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        let sx = self.geom.stride[2];
        self.for_each_run(channels, |col, img, lo, hi| {
            let dst = &mut cols[col + lo..col + hi];
            if sx == 1 {
                dst.copy_from_slice(&image[img..img + (hi - lo)]);
            } else {
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = image[img + j * sx];
                }
            }
        });
    }

    /// Adjoint of `im2col`: scatters-adds `cols` into `image`.
    fn col2im<T: Real>(&self, channels: usize, cols: &[T], image: &mut [T]) {
        let sx = self.geom.stride[2];
        self.for_each_run(channels, |col, img, lo, hi| {
            let src = &cols[col + lo..col + hi];
            if sx == 1 {
                for (d, &s) in image[img..img + (hi - lo)].iter_mut().zip(src) {
                    *d += s;
                }
            } else {
                for (j, &s) in src.iter().enumerate() {
                    image[img + j * sx] += s;
                }
            }
        });
    }
}

/// Canonical 5D view `[n, c, d, h, w]` of a 4D or 5D shape.
fn as_volume(shape: &[usize]) -> [usize; 5] {
    match *shape {
        [n, c, h, w] => [n, c, 1, h, w],
        [n, c, d, h, w] => [n, c, d, h, w],
        _ => unreachable!("validated rank"),
    }
}

fn spatial(v: [usize; 5]) -> [usize; 3] {
    [v[2], v[3], v[4]]
}

fn output_shape(rank: usize, n: usize, c: usize, sp: [usize; 3]) -> Vec<usize> {
    if rank == 4 {
        vec![n, c, sp[1], sp[2]]
    } else {
        vec![n, c, sp[0], sp[1], sp[2]]
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvRecord {
    pub input: Var,
    pub weight: Var,
    pub bias: Option<Var>,
    pub geom: ConvGeom,
    pub transposed: bool,
}

pub(crate) fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Tensor<T> {
    let [n, cin, ..] = as_volume(x.shape());
    let cout = w.shape()[0];
    let in_sp = spatial(as_volume(x.shape()));
    let out_sp = geom.conv_output(in_sp).expect("validated geometry");
    let low = Lowering {
        geom,
        image: in_sp,
        cols: out_sp,
    };
    let p = low.col_len();
    let ck = cin * geom.taps();
    let img_len = cin * low.image_len();
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = if geom.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * p]
    };
    for i in 0..n {
        let img = &x.data()[i * img_len..(i + 1) * img_len];
        let cols_ref: &[T] = if geom.is_pointwise() {
            img
        } else {
            low.im2col(cin, img, &mut cols);
            &cols
        };
        let dst = &mut out[i * cout * p..(i + 1) * cout * p];
        matmul(MatRef::new(w.data(), cout, ck), MatRef::new(cols_ref, ck, p), dst, false);
        if let Some(b) = b {
            for (row, &bv) in dst.chunks_mut(p).zip(b.data()) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_parts(output_shape(x.ndim(), n, cout, out_sp), out)
}

pub(crate) fn deconv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geom: &ConvGeom,
) -> Tensor<T> {
    let [n, cin, ..] = as_volume(x.shape());
    let cout = w.shape()[1];
    let in_sp = spatial(as_volume(x.shape()));
    let out_sp = geom.transposed_output(in_sp).expect("validated geometry");
    let low = Lowering {
        geom,
        image: out_sp,
        cols: in_sp,
    };
    let p = low.col_len();
    let ck = cout * geom.taps();
    let out_len = cout * low.image_len();
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); ck * p];
    for i in 0..n {
        let src = &x.data()[i * cin * p..(i + 1) * cin * p];
        matmul(MatRef::new(w.data(), cin, ck).t(), MatRef::new(src, cin, p), &mut cols, false);
        let dst = &mut out[i * out_len..(i + 1) * out_len];
        low.col2im(cout, &cols, dst);
        if let Some(b) = b {
            let plane = low.image_len();
            for (chunk, &bv) in dst.chunks_mut(plane).zip(b.data()) {
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_parts(output_shape(x.ndim(), n, cout, out_sp), out)
}

/// Gradients of a (transposed) convolution w.r.t. input, weight and bias.
pub(crate) fn conv_backward<T: Real>(
    rec: &ConvRecord,
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    want: [bool; 3],
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let geom = &rec.geom;
    let [n, cin, ..] = as_volume(x.shape());
    let yv = as_volume(dy.shape());
    let cout = yv[1];
    let in_sp = spatial(as_volume(x.shape()));
    let out_sp = spatial(yv);
    let taps = geom.taps();

    let mut dx = want[0].then(|| vec![T::zero(); x.numel()]);
    let mut dw = want[1].then(|| vec![T::zero(); w.numel()]);
    let db = if want[2] {
        let plane: usize = out_sp.iter().product();
        let mut acc = vec![T::zero(); cout];
        for i in 0..n {
            for (c, a) in acc.iter_mut().enumerate() {
                let start = (i * cout + c) * plane;
                *a += dy.data()[start..start + plane].iter().copied().sum::<T>();
            }
        }
        Some(Tensor::from_parts(vec![cout], acc))
    } else {
        None
    };

    if !rec.transposed {
        let low = Lowering {
            geom,
            image: in_sp,
            cols: out_sp,
        };
        let p = low.col_len();
        let ck = cin * taps;
        let img_len = cin * low.image_len();
        let pointwise = geom.is_pointwise();
        let mut cols = vec![T::zero(); if pointwise { 0 } else { ck * p }];
        for i in 0..n {
            let g = &dy.data()[i * cout * p..(i + 1) * cout * p];
            if let Some(dw) = dw.as_mut() {
                let img = &x.data()[i * img_len..(i + 1) * img_len];
                let cols_ref: &[T] = if pointwise {
                    img
                } else {
                    low.im2col(cin, img, &mut cols);
                    &cols
                };
                matmul(MatRef::new(g, cout, p), MatRef::new(cols_ref, ck, p).t(), dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[i * img_len..(i + 1) * img_len];
                if pointwise {
                    matmul(MatRef::new(w.data(), cout, ck).t(), MatRef::new(g, cout, p), dst, true);
                } else {
                    matmul(MatRef::new(w.data(), cout, ck).t(), MatRef::new(g, cout, p), &mut cols, false);
                    low.col2im(cin, &cols, dst);
                }
            }
        }
    } else {
        let low = Lowering {
            geom,
            image: out_sp,
            cols: in_sp,
        };
        let p = low.col_len();
        let ck = cout * taps;
        let out_len = cout * low.image_len();
        let mut cols = vec![T::zero(); ck * p];
        for i in 0..n {
            low.im2col(cout, &dy.data()[i * out_len..(i + 1) * out_len], &mut cols);
            if let Some(dx) = dx.as_mut() {
                let dst = &mut dx[i * cin * p..(i + 1) * cin * p];
                matmul(MatRef::new(w.data(), cin, ck), MatRef::new(&cols, ck, p), dst, false);
            }
            if let Some(dw) = dw.as_mut() {
                let src = &x.data()[i * cin * p..(i + 1) * cin * p];
                matmul(MatRef::new(src, cin, p), MatRef::new(&cols, ck, p).t(), dw, true);
            }
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        db,
    )
}

fn check_rank(op: &'static str, x: &[usize], rank: usize) -> Result<()> {
    if x.len() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got {x:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    /// 2D convolution; weight `[C_out, C_in, kH, kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        check_rank("conv2d", self.shape(input), 4)?;
        check_rank("conv2d weight", &ws, 4)?;
        let geom = ConvGeom::conv2d(ws[2], ws[3], stride, padding, dilation);
        self.conv_nd("conv2d", input, weight, bias, geom, false)
    }

    /// 3D convolution; weight `[C_out, C_in, kD, kH, kW]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        check_rank("conv3d", self.shape(input), 5)?;
        check_rank("conv3d weight", &ws, 5)?;
        let geom = ConvGeom {
            kernel: [ws[2], ws[3], ws[4]],
            ..ConvGeom::cube(1, stride, padding)
        };
        self.conv_nd("conv3d", input, weight, bias, geom, false)
    }

    /// 3D transposed convolution; weight `[C_in, C_out, kD, kH, kW]`.
    pub fn deconv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let ws = self.shape(weight).to_vec();
        check_rank("deconv3d", self.shape(input), 5)?;
        check_rank("deconv3d weight", &ws, 5)?;
        if output_padding >= stride {
            return Err(Error::invalid(
                "deconv3d",
                format!("output padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            kernel: [ws[2], ws[3], ws[4]],
            ..ConvGeom::cube(1, stride, padding)
        }
        .with_output_padding(output_padding);
        self.conv_nd("deconv3d", input, weight, bias, geom, true)
    }

    pub(crate) fn conv_nd(
        &mut self,
        op: &'static str,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        transposed: bool,
    ) -> Result<Var> {
        geom.validate(op)?;
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let xv = as_volume(&xs);
        let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if xv[1] != w_in {
            return Err(Error::shape(
                op,
                format!("input has {} channels ({xs:?}) but weight expects {w_in} ({ws:?})", xv[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [w_out] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {:?} does not match {w_out} output channels", self.shape(b)),
                ));
            }
        }
        let in_sp = spatial(xv);
        let value = if transposed {
            if geom.transposed_output(in_sp).is_none() {
                return Err(Error::shape(op, format!("non-positive output extent for input {xs:?}, {geom:?}")));
            }
            deconv_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), &geom)
        } else {
            if geom.conv_output(in_sp).is_none() {
                return Err(Error::shape(
                    op,
                    format!("kernel extent exceeds padded input {xs:?} for {geom:?}"),
                ));
            }
            conv_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)), &geom)
        };
        Ok(self.push(
            value,
            Op::Conv(ConvRecord {
                input,
                weight,
                bias,
                geom,
                transposed,
            }),
        ))
    }
}
