//! Binary model checkpoints.
//!
//! Layout (little-endian): magic `TGCK`, `u32` version, `u32` length and
//! UTF-8 JSON of the [`ModelConfig`], `u32` parameter count, then per
//! parameter: `u32` name length, name, `u32` rank, `u64` extents, `f64`
//! values in row-major order.

use super::{build_model, HarnessError, Model, ModelConfig, Result};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(&model.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            HarnessError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Rebuilds the model from its stored config and overwrites every parameter.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let bad = |m: String| HarnessError::Checkpoint(m);
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("config: {e}")))?;
    let mut model = build_model(&cfg)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(bad(format!("{count} parameters, model has {}", model.store.len())));
    }
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| bad(e.to_string()))?.to_owned();
        let id = model.store.id_of(&name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let target = model.store.get_mut(id);
        if target.shape() != shape.as_slice() {
            return Err(bad(format!("{name} has shape {shape:?}, expected {:?}", target.shape())));
        }
        let raw = r.take(target.len().checked_mul(8).ok_or_else(|| bad("size overflow".into()))?)?;
        for (dst, c) in target.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(c.try_into().unwrap());
        }
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
