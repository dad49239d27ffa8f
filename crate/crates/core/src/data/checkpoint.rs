//! Binary checkpoint container.
//!
//! Layout (integers little-endian): magic `CFPN`, format version `u32`,
//! `u32`-length-prefixed UTF-8 `key = value` block, tensor count `u32`, then
//! per tensor a length-prefixed name, `u32` rank, `u32` dims and an `f32`
//! payload, followed by the CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CFPN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KeyValues,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn check(check: &'static str, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        check,
        detail: detail.into(),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| check("size", format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = ck.config.to_text();
    put_u32(&mut out, text.len())?;
    out.extend_from_slice(text.as_bytes());
    put_u32(&mut out, ck.tensors.len())?;
    for (name, t) in &ck.tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.ndim())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(check("length", format!("{what} at byte {} runs past the end", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        let at = self.pos;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| check("utf8", format!("{what} at byte {at} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(check("magic", "file does not start with CFPN"));
    }
    if bytes.len() < 8 {
        return Err(check("crc", "file truncated before the version field"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version != VERSION {
        return Err(check("version", format!("format version {version}, expected {VERSION}")));
    }
    if bytes.len() < 12 {
        return Err(check("crc", "file truncated before the checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("four bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(check("crc", format!("stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let config = KeyValues::parse(r.string("config block")?)?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name = r.string("tensor name")?.to_string();
        let ndim = r.u32("rank")?;
        let shape = (0..ndim).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| check("size", format!("tensor {i} '{name}' is too large")))?;
        let payload = r.take(numel.saturating_mul(4), "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("four bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| check("shape", format!("tensor '{name}': {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(check("length", format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
