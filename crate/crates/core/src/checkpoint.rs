//! Named-tensor checkpoints: one binary blob of little-endian 32-bit
//! floats plus a JSON manifest listing (name, shape, offset) in
//! alphabetical order. Model weights, the embedding table, and optimizer
//! state all travel through the same container.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset of the tensor's first float within the blob.
    pub offset: usize,
}

/// Base path without extension; `.bin` and `.json` siblings are written.
pub fn save_tensors(base: &Path, tensors: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    let bin_path = base.with_extension("bin");
    let json_path = base.with_extension("json");
    let mut blob = Vec::new();
    let mut manifest = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: [tensor.nrows(), tensor.ncols()],
            offset: blob.len(),
        });
        for v in tensor.iter() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse(&json_path, e.to_string()))?;
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
}

pub fn load_tensors(base: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let bin_path = base.with_extension("bin");
    let json_path = base.with_extension("json");
    let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::parse(&json_path, e.to_string()))?;
    let mut tensors = BTreeMap::new();
    for entry in manifest {
        let n = entry.shape[0] * entry.shape[1];
        let end = entry.offset + 4 * n;
        if end > blob.len() {
            return Err(Error::Truncated {
                path: bin_path.clone(),
                expected: end,
                actual: blob.len(),
            });
        }
        let mut tensor = Array2::zeros((entry.shape[0], entry.shape[1]));
        for (i, chunk) in blob[entry.offset..end].chunks_exact(4).enumerate() {
            tensor[(i / entry.shape[1].max(1), i % entry.shape[1].max(1))] =
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
        if tensors.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::parse(
                &json_path,
                format!("duplicate tensor `{}`", entry.name),
            ));
        }
    }
    Ok(tensors)
}

/// Strip a `.bin`/`.json` extension so either file path addresses the pair.
pub fn checkpoint_base(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}
