//! Named-tensor checkpoint container.
//!
//! Layout: the 8-byte magic `ERCCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! tensor's values as little-endian `f64` in header order. Values are stored
//! in 64-bit regardless of training precision; 32-bit parameters widen and
//! narrow back exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use erc_core::model::{FusionModel, ModelConfig};
use erc_core::{ParamStore, Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ERCCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub corpus: String,
    pub seed: u64,
    pub epoch: usize,
    pub val_weighted_f1: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub emotions: Vec<String>,
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Tensor<f64>>,
}

pub fn save<F: Real>(
    path: &Path,
    model: &ModelConfig,
    emotions: &[String],
    meta: CheckpointMeta,
    store: &ParamStore<F>,
) -> Result<()> {
    let header = CheckpointHeader {
        model: model.clone(),
        emotions: emotions.to_vec(),
        meta,
        tensors: store.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * store.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in store.iter() {
        for &x in p.value.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format(path, d.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut rest = &bytes[20 + len..];
    let mut values = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(bad(&format!("truncated data for {}", t.name)));
        }
        let data = rest[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        rest = &rest[8 * n..];
        values.push(Tensor::new(t.shape.clone(), data).map_err(|e| bad(&e.to_string()))?);
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, values })
}

impl Checkpoint {
    /// Rebuilds the model and fills every parameter from the file.
    pub fn restore<F: Real>(&self) -> Result<(FusionModel, ParamStore<F>)> {
        let mut store = ParamStore::<F>::new();
        let model = FusionModel::new(&self.header.model, &mut store, 0)?;
        if store.len() != self.values.len() {
            return Err(Error::Core(erc_core::Error::shape(
                "checkpoint",
                "parameter tensors",
                store.len(),
                self.values.len(),
            )));
        }
        for (entry, value) in self.header.tensors.iter().zip(&self.values) {
            store.set_value(&entry.name, value.cast())?;
        }
        Ok((model, store))
    }
}
