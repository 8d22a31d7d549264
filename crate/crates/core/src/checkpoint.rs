//! Checkpoint directories: a JSON manifest plus one TSV matrix per tensor.
//!
//! ```text
//! manifest.json          shape, seed, pipeline, tensor list with SHA-256 digests
//! manifest.sha256        digest of manifest.json
//! <tensor name>.tsv      row-major values, one row per line
//! ```
//!
//! Values are written in shortest round-trip decimal form, so a save/load
//! cycle restores every parameter exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_io::{format_matrix_tsv, read_matrix_tsv};
use crate::error::{Error, Result};
use crate::model::{ModelShape, ModelState};
use crate::scalar::Scalar;
use crate::training::Pipeline;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_DIGEST: &str = "manifest.sha256";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub shape: ModelShape,
    pub seed: u64,
    pub pipeline: Pipeline,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

pub fn save_checkpoint<T: Scalar>(state: &ModelState<T>, seed: u64, pipeline: &Pipeline, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for p in state.params() {
        let m = Array2::from_shape_vec((p.rows, p.cols), p.values.to_vec()).expect("tensor view is rectangular");
        let text = format_matrix_tsv(&m);
        let file = format!("{}.tsv", p.name);
        let path = dir.join(&file);
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name: p.name.to_string(),
            rows: p.rows,
            cols: p.cols,
            file,
            sha256: sha256_hex(text.as_bytes()),
        });
    }
    let manifest = CheckpointManifest {
        shape: state.shape,
        seed,
        pipeline: *pipeline,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    let path = dir.join(MANIFEST);
    fs::write(&path, &json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(MANIFEST_DIGEST);
    fs::write(&path, sha256_hex(json.as_bytes()) + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a checkpoint, verifying the manifest digest, every tensor digest,
/// and every shape against the manifest's model shape.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ModelState<T>, CheckpointManifest)> {
    let path = dir.join(MANIFEST);
    let json = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let digest_path = dir.join(MANIFEST_DIGEST);
    let recorded = fs::read_to_string(&digest_path).map_err(|e| Error::io(&digest_path, e))?;
    if recorded.trim() != sha256_hex(&json) {
        return Err(integrity(format!("{} does not match its recorded digest", path.display())));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&json)?;

    let mut state = ModelState::<T>::zeros(manifest.shape);
    let expected: Vec<(String, usize, usize)> = state.params().iter().map(|p| (p.name.to_string(), p.rows, p.cols)).collect();
    if manifest.tensors.len() != expected.len() {
        return Err(integrity(format!(
            "manifest lists {} tensors, the model has {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((entry, (name, rows, cols)), target) in manifest.tensors.iter().zip(&expected).zip(state.params_mut()) {
        if entry.name != *name || entry.rows != *rows || entry.cols != *cols {
            return Err(integrity(format!(
                "manifest entry {} ({}×{}) does not match expected {name} ({rows}×{cols})",
                entry.name, entry.rows, entry.cols
            )));
        }
        if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
            return Err(integrity(format!("tensor file name {:?} leaves the checkpoint directory", entry.file)));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(integrity(format!("{} does not match its manifest digest", path.display())));
        }
        let m: Array2<T> = read_matrix_tsv(&path, Some(entry.cols))?;
        if m.nrows() != entry.rows {
            return Err(integrity(format!("{} has {} rows, manifest says {}", path.display(), m.nrows(), entry.rows)));
        }
        target.values.copy_from_slice(m.as_slice().expect("freshly built matrix"));
    }
    Ok((state, manifest))
}
