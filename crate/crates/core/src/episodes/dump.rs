//! Episode dump files.
//!
//! ```text
//! "TBSE" | version: u32 | count: u32
//! per episode:
//!   seed: u64 | category: u8 | difficulty: u8 | shots: u16 | side: u16
//!   query, then each support:
//!     image: side·side f32 | mask: side·side u8 (0 or 1)
//! ```
//!
//! All integers and floats are little-endian. Shape metadata is not stored.

use std::io::{Read, Write};

use super::generator::{Difficulty, Episode, Sample};
use super::IMAGE_SIZE;
use crate::error::{Result, TbsError};
use crate::tensor::Tensor;

pub const DUMP_MAGIC: &[u8; 4] = b"TBSE";
pub const DUMP_VERSION: u32 = 1;

fn io(e: std::io::Error) -> TbsError {
    TbsError::Dump(e.to_string())
}

pub fn write_dump<W: Write>(w: &mut W, episodes: &[Episode]) -> Result<()> {
    w.write_all(DUMP_MAGIC).map_err(io)?;
    w.write_all(&DUMP_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(episodes.len() as u32).to_le_bytes()).map_err(io)?;
    for ep in episodes {
        let mut buf = Vec::new();
        buf.extend_from_slice(&ep.seed.to_le_bytes());
        buf.push(ep.category as u8);
        buf.push(ep.difficulty.tag());
        buf.extend_from_slice(&(ep.supports.len() as u16).to_le_bytes());
        buf.extend_from_slice(&(IMAGE_SIZE as u16).to_le_bytes());
        for s in std::iter::once(&ep.query).chain(&ep.supports) {
            for v in s.image.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend(s.mask.iter().map(|&m| m as u8));
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io)?;
    Ok(b)
}

pub fn read_dump<R: Read>(r: &mut R) -> Result<Vec<Episode>> {
    if &take::<_, 4>(r)? != DUMP_MAGIC {
        return Err(TbsError::Dump("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(r)?);
    if version != DUMP_VERSION {
        return Err(TbsError::Dump(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let seed = u64::from_le_bytes(take(r)?);
        let [category, tag] = take(r)?;
        let shots = u16::from_le_bytes(take(r)?) as usize;
        let side = u16::from_le_bytes(take(r)?) as usize;
        if side != IMAGE_SIZE {
            return Err(TbsError::Dump(format!("unsupported image side {side}")));
        }
        let difficulty = Difficulty::from_tag(tag).ok_or_else(|| TbsError::Dump(format!("bad difficulty tag {tag}")))?;
        let mut samples = Vec::with_capacity(shots + 1);
        for _ in 0..=shots {
            let mut raw = vec![0u8; side * side * 4];
            r.read_exact(&mut raw).map_err(io)?;
            let img = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let mut mask = vec![0u8; side * side];
            r.read_exact(&mut mask).map_err(io)?;
            if mask.iter().any(|&m| m > 1) {
                return Err(TbsError::Dump("mask byte outside {0, 1}".into()));
            }
            samples.push(Sample {
                image: Tensor::new(vec![1, side, side], img)?,
                mask: mask.into_iter().map(|m| m == 1).collect(),
                shapes: Vec::new(),
            });
        }
        let query = samples.remove(0);
        out.push(Episode {
            query,
            supports: samples,
            category: category as usize,
            difficulty,
            seed,
        });
    }
    Ok(out)
}
