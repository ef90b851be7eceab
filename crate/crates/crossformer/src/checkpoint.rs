//! Self-describing binary checkpoints.
//!
//! ```text
//! magic         8 bytes  "XFORMCKP"
//! version       u32
//! header_len    u64, then that many bytes of JSON {"model": …, "epoch": …}
//! slot_count    u32
//! per slot      name_len u32, name (UTF-8), rank u32, dims u64 × rank,
//!               values f64 × prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crossformer_core::model::{ModelConfig, ModelParams, ParamSlot};
use crossformer_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"XFORMCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    /// Completed epochs when the checkpoint was taken.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

pub fn encode(header: &CheckpointHeader, params: &ModelParams) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| CliError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + json.len() + params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.slots().len() as u32).to_le_bytes());
    for slot in params.slots() {
        out.extend_from_slice(&(slot.name.len() as u32).to_le_bytes());
        out.extend_from_slice(slot.name.as_bytes());
        out.extend_from_slice(&(slot.value.shape().len() as u32).to_le_bytes());
        for &d in slot.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in slot.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CliError::Format("checkpoint length overflows".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CliError::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = r.len()?;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| CliError::Format(format!("checkpoint header: {e}")))?;
    let count = r.u32()? as usize;
    let mut slots = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CliError::Format("slot name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| CliError::Format(format!("slot `{name}` shape overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| CliError::Format("slot too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        slots.push(ParamSlot { name, value: Tensor::new(shape, data)? });
    }
    if r.pos != bytes.len() {
        return Err(CliError::Format(format!("{} trailing bytes after the last slot", bytes.len() - r.pos)));
    }
    let params = ModelParams::from_slots(&header.model, slots)?;
    Ok(Checkpoint { header, params })
}

/// Writes through a temporary file and a rename, so a crash never leaves a
/// half-written checkpoint behind.
pub fn save(path: &Path, header: &CheckpointHeader, params: &ModelParams) -> Result<()> {
    let bytes = encode(header, params)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        CliError::Format(m) => CliError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
