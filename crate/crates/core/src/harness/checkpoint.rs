//! Binary checkpoints: `MAGIC`, a little-endian `u64` manifest length, the
//! JSON manifest, then every tensor as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::config::ModelConfig;
use crate::harness::model::Model;
use crate::harness::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYMOECK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    /// Hex SHA-256 of the payload.
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
}

pub fn encode_checkpoint(model: &Model, step: usize) -> Vec<u8> {
    let mut payload = Vec::with_capacity(model.num_params() * 8);
    let mut tensors = Vec::with_capacity(model.params().len());
    for e in model.params().entries() {
        tensors.push(TensorEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset: payload.len(),
        });
        for v in e.tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        step,
        config: model.config().clone(),
        tensors,
        payload_bytes: payload.len(),
        checksum: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(model: &Model, step: usize, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, step))?;
    Ok(())
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

/// Splits and verifies a checkpoint, returning the manifest and payload.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(integrity("not a checkpoint (bad header)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = 16usize
        .checked_add(usize::try_from(len).map_err(|_| integrity("manifest length overflows"))?)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| integrity("manifest truncated"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| integrity(format!("manifest unreadable: {e}")))?;
    let payload = &bytes[end..];
    if payload.len() != manifest.payload_bytes {
        return Err(integrity(format!(
            "payload has {} bytes, manifest expects {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.checksum {
        return Err(integrity("payload checksum mismatch"));
    }
    Ok((manifest, payload))
}

fn read_store(manifest: &Manifest, payload: &[u8]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let bytes = t
            .offset
            .checked_add(n * 8)
            .and_then(|end| payload.get(t.offset..end))
            .ok_or_else(|| integrity(format!("tensor `{}` lies outside the payload", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data)
            .map_err(|e| integrity(format!("tensor `{}`: {e}", t.name)))?;
        store.add(t.name.clone(), "checkpoint", tensor);
    }
    Ok(store)
}

/// Rebuilds the model described by the manifest and restores its tensors.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = decode_manifest(bytes)?;
    let config = manifest.config.clone();
    restore(&manifest, payload, &config)
}

/// Restores tensors into a model built from `config`; any name or shape
/// disagreement is reported against the offending parameter.
pub fn decode_checkpoint_with(bytes: &[u8], config: &ModelConfig) -> Result<Checkpoint> {
    let (manifest, payload) = decode_manifest(bytes)?;
    restore(&manifest, payload, config)
}

fn restore(manifest: &Manifest, payload: &[u8], config: &ModelConfig) -> Result<Checkpoint> {
    let stored = read_store(manifest, payload)?;
    let mut model = Model::from_config(config)?;
    if let Some(extra) = stored
        .entries()
        .iter()
        .find(|e| model.params().id(&e.name).is_none())
    {
        return Err(Error::Mismatch {
            name: extra.name.clone(),
            detail: "present in checkpoint but not in the model".into(),
        });
    }
    model.params_mut().load_values(&stored)?;
    Ok(Checkpoint {
        model,
        step: manifest.step,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| integrity(format!("cannot read {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read(path)?)
}

pub fn load_checkpoint_with(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    decode_checkpoint_with(&read(path)?, config)
}
