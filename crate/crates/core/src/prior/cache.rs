//! Latent-sequence cache: `u32` header `{m, C, count}` then, per sequence,
//! a varint node count followed by `n·C` varint indices.

use std::io::{Read, Write};
use std::path::Path;

use super::IndexSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceCache {
    pub m: usize,
    pub parts: usize,
    pub seqs: Vec<IndexSequence>,
}

fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

fn get_varint(buf: &[u8], at: &mut usize) -> Result<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let &b = buf.get(*at).ok_or_else(|| Error::Format("sequence cache truncated".into()))?;
        *at += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(Error::Format("varint longer than 64 bits".into()))
}

impl SequenceCache {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for v in [self.m, self.parts, self.seqs.len()] {
            let v = u32::try_from(v).map_err(|_| Error::Format("cache header field exceeds u32".into()))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.seqs {
            if s.parts != self.parts {
                return Err(Error::Shape("sequence partition count differs from the cache".into()));
            }
            put_varint(&mut out, s.n() as u64);
            for &k in &s.rows {
                if k >= self.m {
                    return Err(Error::Shape(format!("index {k} beyond codebook size {}", self.m)));
                }
                put_varint(&mut out, k as u64);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 {
            return Err(Error::Format("sequence cache header truncated".into()));
        }
        let word = |i: usize| u32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let (m, parts, count) = (word(0), word(1), word(2));
        if parts == 0 {
            return Err(Error::Format("sequence cache with zero partitions".into()));
        }
        let mut at = 12;
        let mut seqs = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = get_varint(buf, &mut at)? as usize;
            let mut rows = Vec::with_capacity(n.saturating_mul(parts).min(1 << 20));
            for _ in 0..n * parts {
                let k = get_varint(buf, &mut at)? as usize;
                if k >= m {
                    return Err(Error::Format(format!("index {k} beyond codebook size {m}")));
                }
                rows.push(k);
            }
            seqs.push(IndexSequence { parts, rows });
        }
        if at != buf.len() {
            return Err(Error::Format("trailing bytes after sequence cache".into()));
        }
        Ok(SequenceCache { m, parts, seqs })
    }
}

pub fn write_sequences(path: &Path, cache: &SequenceCache) -> Result<()> {
    let bytes = cache.to_bytes()?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<SequenceCache> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    SequenceCache::from_bytes(&buf)
}
