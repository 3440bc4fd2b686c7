//! Checkpoint directories: `index.json` plus `params.bin`.
//!
//! `index.json` maps each parameter name (in store order) to its shape, dtype
//! and byte offset into `params.bin`, which holds little-endian `f32` values
//! concatenated in index order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Precision, Tensor};
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: u64,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = IndexMap::new();
    let mut bytes = Vec::with_capacity(store.num_values() * 4);
    for (name, t) in store.iter() {
        index.insert(
            name.clone(),
            CheckpointEntry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: bytes.len() as u64,
            },
        );
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let index_path = dir.join(INDEX_FILE);
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(&index_path, json).map_err(|e| Error::io(&index_path, e))?;
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<IndexMap<String, CheckpointEntry>> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let index = read_index(dir)?;
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    let mut store = ParamStore::new();
    for (name, entry) in index {
        if entry.dtype != "f32" {
            return Err(Error::validation(format!("{name}: unsupported dtype {}", entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 4;
        if end > bytes.len() {
            return Err(Error::validation(format!(
                "{name}: data runs past end of {PARAMS_FILE}"
            )));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(name, Tensor::new(entry.shape, data, Precision::F32)?);
    }
    Ok(store)
}
