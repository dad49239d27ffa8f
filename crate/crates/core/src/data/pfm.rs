//! Portable float map codec (`Pf` grayscale, `PF` colour).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Decoded PFM image. `data` is row-major from the top row down, with
/// channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    /// Absolute value of the header scale.
    pub scale: f32,
    pub little_endian: bool,
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "pfm",
        offset: offset as u64,
        detail: detail.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Next whitespace-delimited header token and its starting offset.
    fn token(&mut self) -> Result<(usize, &'a str)> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format_err(start, "unexpected end of header"));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| format_err(start, "header is not ASCII"))?;
        Ok((start, text))
    }
}

/// Parses an in-memory PFM file.
pub fn decode_pfm(bytes: &[u8]) -> Result<Pfm> {
    let mut c = Cursor { bytes, pos: 0 };
    let (at, magic) = c.token()?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(format_err(at, format!("bad magic '{other}', expected 'Pf' or 'PF'"))),
    };
    let mut dim = || -> Result<usize> {
        let (at, t) = c.token()?;
        match t.parse::<i64>() {
            Ok(v) if v > 0 => Ok(v as usize),
            _ => Err(format_err(at, format!("dimension '{t}' is not a positive integer"))),
        }
    };
    let width = dim()?;
    let height = dim()?;
    let (at, t) = c.token()?;
    let scale: f32 = t.parse().map_err(|_| format_err(at, format!("scale '{t}' is not a number")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(at, format!("scale {scale} must be finite and non-zero")));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err(format_err(c.pos, "missing separator after scale"));
    }
    let start = c.pos + 1;
    let little_endian = scale < 0.0;
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err(at, "image size overflows"))?;
    let needed = count * 4;
    let available = bytes.len() - start;
    if available < needed {
        return Err(format_err(
            bytes.len(),
            format!("payload has {available} bytes, {needed} required"),
        ));
    }
    let row = width * channels;
    let mut data = vec![0.0f32; count];
    for (r, src) in bytes[start..start + needed].chunks_exact(row * 4).enumerate() {
        let dst = &mut data[(height - 1 - r) * row..(height - r) * row];
        for (d, b) in dst.iter_mut().zip(src.chunks_exact(4)) {
            let b: [u8; 4] = b.try_into().expect("chunk of four");
            *d = if little_endian { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        }
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
        scale: scale.abs(),
        little_endian,
    })
}

/// Serializes `pfm`, honouring its `little_endian` flag.
pub fn encode_pfm(pfm: &Pfm) -> Result<Vec<u8>> {
    if pfm.channels != 1 && pfm.channels != 3 {
        return Err(Error::invalid("write_pfm", format!("{} channels; PFM holds 1 or 3", pfm.channels)));
    }
    if pfm.width == 0 || pfm.height == 0 || pfm.data.len() != pfm.width * pfm.height * pfm.channels {
        return Err(Error::invalid(
            "write_pfm",
            format!("{} values for a {}x{}x{} image", pfm.data.len(), pfm.height, pfm.width, pfm.channels),
        ));
    }
    if !(pfm.scale > 0.0) || !pfm.scale.is_finite() {
        return Err(Error::invalid("write_pfm", format!("scale {} must be positive", pfm.scale)));
    }
    let magic = if pfm.channels == 1 { "Pf" } else { "PF" };
    let scale = if pfm.little_endian { -pfm.scale } else { pfm.scale };
    let mut out = format!("{magic}\n{} {}\n{scale:?}\n", pfm.width, pfm.height).into_bytes();
    out.reserve(pfm.data.len() * 4);
    let row = pfm.width * pfm.channels;
    for r in (0..pfm.height).rev() {
        for v in &pfm.data[r * row..(r + 1) * row] {
            out.extend_from_slice(&if pfm.little_endian { v.to_le_bytes() } else { v.to_be_bytes() });
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Pfm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes)
}

pub fn write_pfm(path: impl AsRef<Path>, pfm: &Pfm) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pfm(pfm)?).map_err(|e| Error::io(path, e))
}

impl Pfm {
    /// Single-channel map with unit scale.
    pub fn gray(width: usize, height: usize, data: Vec<f32>, little_endian: bool) -> Self {
        Pfm {
            width,
            height,
            channels: 1,
            data,
            scale: 1.0,
            little_endian,
        }
    }
}
