//! Model checkpoints: a JSON header followed by little-endian tensor payloads.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic "VRFCKPT1"
//! bytes 8..16   header length H, u64 little-endian
//! bytes 16..16+H  UTF-8 JSON header (CheckpointHeader)
//! rest          tensors in header order, each `count` values of `dtype`
//! ```

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use visreformer_core::model::{ModelConfig, VisionModel};
use visreformer_core::params::ParamMap;
use visreformer_core::{Error, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"VRFCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn of<T: Real>() -> Self {
        if std::mem::size_of::<T>() == 4 {
            Dtype::F32
        } else {
            Dtype::F64
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values before this tensor in the payload.
    pub offset: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: Dtype,
    pub master_seed: u64,
    pub config: ModelConfig,
    /// Completed training epochs, if saved by a training run.
    pub epochs: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<T: Real>(model: &VisionModel<T>, epochs: Option<usize>) -> Result<Vec<u8>> {
    let dtype = Dtype::of::<T>();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in &model.params {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, count: t.len() });
        offset += t.len();
    }
    let header = CheckpointHeader {
        format_version: 1,
        dtype,
        master_seed: model.master_seed,
        config: model.config.clone(),
        epochs,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.values() {
        for v in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    Ok(out)
}

fn ingestion(offset: usize, reason: impl Into<String>) -> Error {
    Error::Ingestion { offset: offset as u64, reason: reason.into() }
}

/// Parses a checkpoint; values are converted to `T` when the stored dtype differs.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(VisionModel<T>, CheckpointHeader)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ingestion(0, "not a checkpoint (bad magic or too short)").into());
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| ingestion(8, "header runs past end of file"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| ingestion(16, format!("malformed header: {e}")))?;
    let width = header.dtype.width();
    let mut params = ParamMap::new();
    for entry in &header.tensors {
        if entry.shape.iter().product::<usize>() != entry.count {
            return Err(ingestion(16, format!("tensor {} shape {:?} holds {} values", entry.name, entry.shape, entry.count)).into());
        }
        let start = end + entry.offset * width;
        let stop = start + entry.count * width;
        if stop > bytes.len() {
            return Err(ingestion(bytes.len(), format!("payload of {} truncated", entry.name)).into());
        }
        let values = bytes[start..stop]
            .chunks_exact(width)
            .map(|c| match header.dtype {
                Dtype::F32 => T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                Dtype::F64 => T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        params.insert(entry.name.clone(), Tensor::new(&entry.shape, values)?);
    }
    let model = VisionModel::from_parts(header.config.clone(), header.master_seed, params)?;
    Ok((model, header))
}

pub fn save<T: Real>(model: &VisionModel<T>, epochs: Option<usize>, path: &Path) -> Result<()> {
    let bytes = encode(model, epochs)?;
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(VisionModel<T>, CheckpointHeader)> {
    let bytes = std::fs::read(path)
        .map_err(|e| ingestion(0, format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}
