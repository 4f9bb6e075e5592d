//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CPLNCKPT"
//! version      u32      currently 1
//! config_len   u32      byte length of the config JSON
//! config       config_len bytes, UTF-8 JSON of the ModelConfig
//! count        u32      number of tensors
//! count times:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   values     prod(dims) x f64 (IEEE-754 binary64)
//! ```
//!
//! Tensors appear in [`Model::params`] order. Loading rejects trailing bytes,
//! unknown or missing names, and shape mismatches.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"CPLNCKPT";
pub const VERSION: u32 = 1;

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large: {n}")))
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = serde_json::to_vec(&model.config)?;
    out.extend_from_slice(&u32_len(config.len(), "config")?.to_le_bytes());
    out.extend_from_slice(&config);
    let params = model.params();
    out.extend_from_slice(&u32_len(params.len(), "tensor count")?.to_le_bytes());
    for p in params {
        out.extend_from_slice(&u32_len(p.name.len(), "name")?.to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&u32_len(p.dims.len(), "rank")?.to_le_bytes());
        for &d in &p.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(n)?)?;
    let mut model = Model::new(config, 0)?;
    let count = c.u32()? as usize;
    let mut slots = model.params_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, model has {}",
            slots.len()
        )));
    }
    let mut seen = vec![false; slots.len()];
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let idx = slots
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
        if seen[idx] {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        seen[idx] = true;
        let slot = &mut slots[idx];
        if slot.dims != dims {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} has shape {dims:?}, expected {:?}",
                slot.dims
            )));
        }
        let raw = c.take(slot.values.len() * 8)?;
        for (v, b) in slot.values.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    drop(slots);
    if !model.all_finite() {
        return Err(Error::Checkpoint("non-finite parameter values".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
