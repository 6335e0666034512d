//! Model checkpoint format.
//!
//! Layout: the 8-byte magic `CFCKPT01`, a little-endian `u64` manifest
//! length, the JSON manifest (architecture config, codec reference, and
//! the ordered parameter names with shapes), then each parameter's raw
//! little-endian `f32` data concatenated in manifest order.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::param::Parameter;
use crate::numeric::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFCKPT01";

/// Parameter payload of a checkpoint, in manifest order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    /// Architecture config, opaque to this module.
    pub arch: serde_json::Value,
    /// Codec reference (inline codec manifest or null).
    pub codec: serde_json::Value,
    /// Parameter order for the data section.
    pub params: Vec<ParamInfo>,
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    arch: serde_json::Value,
    codec: serde_json::Value,
    params: &[Parameter<f32>],
) -> Result<()> {
    let path = path.as_ref();

    let mut seen = HashSet::new();
    for p in params {
        if !seen.insert(p.name.as_str()) {
            return Err(Error::Checkpoint(format!("duplicate parameter name {:?}", p.name)));
        }
    }

    let manifest = CheckpointManifest {
        arch,
        codec,
        params: params
            .iter()
            .map(|p| ParamInfo {
                name: p.name.clone(),
                shape: p.tensor.shape(),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(
        CHECKPOINT_MAGIC.len() + 8 + manifest_bytes.len() + params.iter().map(|p| p.tensor.len() * 4).sum::<usize>(),
    );
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for p in params {
        for &x in p.tensor.data().iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a checkpoint back as its manifest plus named leaf tensors, in
/// manifest order.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointManifest, NamedTensors)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;

    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + manifest_len;
    if bytes.len() < data_start {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[16..data_start])?;

    let mut tensors = Vec::with_capacity(manifest.params.len());
    let mut offset = data_start;
    for info in &manifest.params {
        let count: usize = info.shape.iter().product();
        let end = offset + count * 4;
        if bytes.len() < end {
            return Err(Error::Checkpoint(format!(
                "truncated data for parameter {:?}",
                info.name
            )));
        }
        let data: Vec<f32> = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((info.name.clone(), Tensor::new(&info.shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter data",
            bytes.len() - offset
        )));
    }
    Ok((manifest, tensors))
}
