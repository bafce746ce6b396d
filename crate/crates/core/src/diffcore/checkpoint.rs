//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "HLATCKPT"
//! u32       format version (1)
//! u64       header length H
//! H bytes   JSON header (CheckpointHeader)
//! ...       parameter arrays in header order, f64 row-major
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HLATCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// "han" or "vqa".
    pub model: String,
    /// "unsupervised" / "supervised" for answerer checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub hyperparameters: serde_json::Value,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub params: Vec<ParamEntry>,
}

impl CheckpointHeader {
    pub fn new(model: &str, hyperparameters: serde_json::Value, seed: u64, step: u64) -> Self {
        CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            model: model.to_string(),
            mode: None,
            hyperparameters,
            seed,
            step,
            params: Vec::new(),
        }
    }
}

pub fn encode_checkpoint(store: &ParameterStore, header: &CheckpointHeader) -> Result<Vec<u8>> {
    let mut header = header.clone();
    header.format_version = CHECKPOINT_VERSION;
    header.params = store
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + store.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParameterStore, CheckpointHeader)> {
    let fail = |offset: usize, msg: &str| Error::format(path, offset as u64, msg);
    if bytes.len() < 20 {
        return Err(fail(bytes.len(), "truncated checkpoint preamble"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail(0, "bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fail(8, &format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fail(12, "header length exceeds file size"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[20..body])
        .map_err(|e| fail(20, &format!("invalid header json: {e}")))?;
    let mut store = ParameterStore::new();
    let mut offset = body;
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 8;
        if end > bytes.len() {
            return Err(fail(offset, &format!("truncated data for {:?}", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| fail(offset, &e.to_string()))?;
        store
            .insert(entry.name.clone(), t)
            .map_err(|e| fail(offset, &e.to_string()))?;
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fail(offset, "trailing bytes after parameter data"));
    }
    Ok((store, header))
}

pub fn save_checkpoint(path: &Path, store: &ParameterStore, header: &CheckpointHeader) -> Result<()> {
    let bytes = encode_checkpoint(store, header)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterStore, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Content hash of a checkpoint file, used as its provenance id.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}
