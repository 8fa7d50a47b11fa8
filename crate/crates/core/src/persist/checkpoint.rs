//! Binary checkpoint with a JSON sidecar.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDRA" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 dtype (0 = f32) | u8 rank
//!             | u32 dims[rank] | row-major payload
//! ```
//!
//! The sidecar `<checkpoint>.json` holds the model configuration, which
//! fixes every expected tensor shape.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_bytes, read_json, write_atomic, write_json};
use crate::error::{CheckpointError, Result};
use crate::model::{FdraModel, ModelConfig};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"FDRA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub model: ModelConfig,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DType::F32 as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated);
    }
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch(version));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8()?;
        if dtype != DType::F32 as u8 {
            return Err(CheckpointError::UnsupportedDtype(dtype));
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name}: shape overflows")))?;
        let payload = r.take(numel.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data).expect("payload sized from shape")));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Writes the checkpoint and its sidecar.
pub fn save_checkpoint(model: &FdraModel<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tensors(model.params().iter()))?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            version: VERSION,
            model: model.config().clone(),
        },
    )
}

/// Reads a checkpoint, validating every tensor against the sidecar config.
pub fn load_checkpoint(path: &Path) -> Result<FdraModel<f32>> {
    let sidecar: Sidecar = read_json(&sidecar_path(path))?;
    if sidecar.version != VERSION {
        return Err(CheckpointError::VersionMismatch(sidecar.version).into());
    }
    let tensors = decode_tensors(&read_bytes(path)?)?;
    let mut model = FdraModel::new(sidecar.model)?;
    model.load_params(tensors)?;
    Ok(model)
}
