//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TBSC" | version u32 | entry count u32
//! per entry: name length u32 | name (UTF-8) | rank u32 | extents u64 × rank | f32 × numel
//! CRC-32 (IEEE) u32 over every preceding byte
//! ```

use std::path::Path;

use crate::error::{Result, TbsError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TBSC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> TbsError {
    TbsError::Checkpoint(msg.into())
}

pub fn encode(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.total_len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
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
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated"))?;
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

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    if bytes.len() < 16 {
        return Err(corrupt("file too short"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(format!("CRC mismatch: stored {stored:#010x}, computed {actual:#010x}")));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("entry name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| corrupt("extent overflow"))))
            .collect::<Result<Vec<usize>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= body.len() / 4)
            .ok_or_else(|| corrupt(format!("implausible shape {shape:?} for {name}")))?;
        let raw = r.take(4 * numel)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("{name}: {e}")))?;
        store.add(name, t);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after last entry"));
    }
    Ok(store)
}

/// Writes through a sibling temporary file, then renames into place.
pub fn save(path: &Path, params: &ParamStore<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(params)).map_err(|e| TbsError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TbsError::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = std::fs::read(path).map_err(|e| TbsError::io(path, e))?;
    decode(&bytes)
}
