//! PNG codecs: KITTI 16-bit disparity maps, 8-bit RGB images and disparity
//! visualizations.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed-point scale of KITTI disparity maps.
pub const KITTI_SCALE: f32 = 256.0;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png(format!("{}: {e}", path.display()))
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
}

fn decode(path: &Path, transform: Transformations) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(transform);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| png_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
    })
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Reads a KITTI disparity map: `[H,W]` disparities and the validity mask
/// (stored zero means no ground truth).
pub fn read_kitti_disp_png(path: impl AsRef<Path>) -> Result<(Tensor<f32>, Vec<bool>)> {
    let path = path.as_ref();
    let d = decode(path, Transformations::IDENTITY)?;
    if d.depth != BitDepth::Sixteen || d.color != ColorType::Grayscale {
        return Err(png_err(
            path,
            format!("expected 16-bit grayscale, found {:?} {:?}", d.depth, d.color),
        ));
    }
    let raw: Vec<u16> = d.bytes.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect();
    let valid = raw.iter().map(|&v| v != 0).collect();
    let disp = raw.iter().map(|&v| v as f32 / KITTI_SCALE).collect();
    Ok((Tensor::new(vec![d.height, d.width], disp)?, valid))
}

/// Quantized KITTI value of one disparity; zero marks it invalid.
pub fn kitti_quantize(d: f32) -> u16 {
    if d.is_finite() && d > 0.0 {
        (d * KITTI_SCALE).round().min(u16::MAX as f32) as u16
    } else {
        0
    }
}

/// Writes `[H,W]` disparities as a KITTI 16-bit PNG. Pixels outside `valid`
/// (or non-positive, or below half a quantization step) are stored as zero.
pub fn write_kitti_disp_png(path: impl AsRef<Path>, disp: &Tensor<f32>, valid: Option<&[bool]>) -> Result<()> {
    let path = path.as_ref();
    if disp.ndim() != 2 {
        return Err(Error::shape("write_kitti_disp_png", format!("expected [H,W], got {:?}", disp.shape())));
    }
    let (h, w) = (disp.shape()[0], disp.shape()[1]);
    if valid.is_some_and(|v| v.len() != h * w) {
        return Err(Error::shape("write_kitti_disp_png", "mask length differs from the map"));
    }
    let bytes: Vec<u8> = disp
        .data()
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| {
            let keep = valid.is_none_or(|v| v[i]);
            (if keep { kitti_quantize(d) } else { 0 }).to_be_bytes()
        })
        .collect();
    encode(path, w, h, ColorType::Grayscale, BitDepth::Sixteen, &bytes)
}

/// Reads an 8- or 16-bit grayscale/RGB(A) PNG as a `[3,H,W]` image in `[0,1]`.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let d = decode(path, Transformations::EXPAND | Transformations::STRIP_16)?;
    let stride = match d.color {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("unsupported colour type {other:?}"))),
    };
    let plane = d.width * d.height;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in d.bytes.chunks_exact(stride).enumerate() {
        for c in 0..3 {
            let v = if stride < 3 { px[0] } else { px[c] };
            data[c * plane + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, d.height, d.width], data)
}

/// Writes a `[3,H,W]` image in `[0,1]` as 8-bit RGB.
pub fn write_rgb_png(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::shape("write_rgb_png", format!("expected [3,H,W], got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let bytes: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |c| (c, i)))
        .map(|(c, i)| (image.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(path, w, h, ColorType::Rgb, BitDepth::Eight, &bytes)
}

/// Writes `[H,W]` disparities as 8-bit grayscale, mapping `[0, d_max]` to
/// `[0, 255]`.
pub fn write_disparity_visualization(path: impl AsRef<Path>, disp: &Tensor<f32>, d_max: usize) -> Result<()> {
    let path = path.as_ref();
    if disp.ndim() != 2 || d_max == 0 {
        return Err(Error::shape(
            "write_disparity_visualization",
            format!("expected [H,W] and d_max > 0, got {:?} and {d_max}", disp.shape()),
        ));
    }
    let scale = 255.0 / d_max as f32;
    let bytes: Vec<u8> = disp
        .data()
        .iter()
        .map(|&d| (d * scale).clamp(0.0, 255.0).round() as u8)
        .collect();
    encode(path, disp.shape()[1], disp.shape()[0], ColorType::Grayscale, BitDepth::Eight, &bytes)
}
