//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SMXC"                      magic
//! u32                         format version
//! u32 len, [u8; len]          config text (key=value lines, UTF-8)
//! u32                         tensor count
//! per tensor:
//!   u32 len, [u8; len]        name (UTF-8)
//!   u32                       rank
//!   u64 * rank                extents
//!   f32 * product(extents)    data
//! ```
//!
//! A standalone tensor (used for raw image files) uses the magic `"SMXT"`,
//! the format version, then one rank/extents/data record as above.

use std::fs;
use std::path::Path;

use super::{ModelConfig, SceneMixer};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SMXC";
pub const TENSOR_MAGIC: &[u8; 4] = b"SMXT";
pub const VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn to_bytes(model: &SceneMixer<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        put_tensor(&mut out, t);
    }
    out
}

pub fn tensor_to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.dims().len() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_tensor(&mut out, t);
    out
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != TENSOR_MAGIC {
        return Err(Error::Checkpoint("bad magic, not a raw tensor file".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    let mut dims = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        dims.push(r.u64("extent")? as usize);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Checkpoint(format!("extents {dims:?} overflow")))?;
    let raw = r.take(len, "tensor data")?;
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&dims, data)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let len = self.u32(what)? as usize;
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<SceneMixer<f32>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a SceneMixer checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config = ModelConfig::from_text(r.string("config")?)?;
    let mut model = SceneMixer::<f32>::zeroed(config)?;
    let count = r.u32("tensor count")? as usize;
    let mut slots = model.named_tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors, config implies {}",
            slots.len()
        )));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let name = r.string("tensor name")?;
        if name != expected_name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {expected_name}, found {name}"
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("extent")? as usize);
        }
        if dims != slot.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has extents {dims:?}, config implies {}",
                slot.shape()
            )));
        }
        let raw = r.take(slot.len() * 4, name)?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    drop(slots);
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            buf.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &SceneMixer<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<SceneMixer<f32>> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}
