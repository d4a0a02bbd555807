//! Single-file archive: `"DGAE"`, `u32` version, `u64`-length JSON header,
//! `u32` tensor count, then per tensor `(u32 name length, name, u8 dtype,
//! u32 rank, u64 dims…, little-endian payload)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DGAE";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub node_cats: usize,
    pub edge_cats: usize,
    /// `"autoencoder"` or `"prior"`.
    pub stage: String,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
    let s = &buf[*at..end];
    *at = end;
    Ok(s)
}

fn take_u32(buf: &[u8], at: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, at, 4)?.try_into().unwrap()))
}

fn take_u64(buf: &[u8], at: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, at, 8)?.try_into().unwrap()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut at = 0;
        if take(buf, &mut at, 4)? != MAGIC {
            return Err(Error::Format("not a DGAE checkpoint".into()));
        }
        let version = take_u32(buf, &mut at)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = take_u64(buf, &mut at)? as usize;
        let header: CheckpointHeader = serde_json::from_slice(take(buf, &mut at, len)?)?;
        let count = take_u32(buf, &mut at)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = take_u32(buf, &mut at)? as usize;
            let name = String::from_utf8(take(buf, &mut at, len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = take(buf, &mut at, 1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("tensor {name}: unknown dtype {dtype}")));
            }
            let rank = take_u32(buf, &mut at)? as usize;
            let shape = (0..rank).map(|_| take_u64(buf, &mut at).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format("tensor too large".into()))?;
            let bytes = take(buf, &mut at, len.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
        }
        if at != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let name = path.file_name().ok_or_else(|| Error::Format(format!("bad checkpoint path {}", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
    }
}
