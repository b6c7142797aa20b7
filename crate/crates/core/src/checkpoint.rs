//! Weights blob plus sidecar JSON metadata.
//!
//! The blob is the concatenation of every parameter of every module, in
//! module order, as little-endian `f32`. The sidecar sits next to it with a
//! `.json` extension and carries the SHA-256 of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Module;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub spec: serde_json::Value,
    pub training_steps: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub notes: BTreeMap<String, String>,
    pub num_params: usize,
    pub sha256: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the weights of `modules` and the completed metadata, which is returned.
pub fn write_checkpoint(path: &Path, modules: &[&dyn Module], mut meta: CheckpointMeta) -> Result<CheckpointMeta> {
    let mut bytes = Vec::new();
    let mut count = 0;
    for m in modules {
        for p in m.params() {
            count += p.len();
            for v in &p.value {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    meta.format_version = FORMAT_VERSION;
    meta.num_params = count;
    meta.sha256 = crate::tensor::digest_hex(&bytes);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, &bytes)?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Reads and verifies a checkpoint of the given kind.
pub fn read_checkpoint(path: &Path, kind: &str) -> Result<(CheckpointMeta, Vec<f32>)> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let json = fs::read_to_string(sidecar_path(path)).map_err(|e| corrupt(format!("metadata: {e}")))?;
    let meta: CheckpointMeta = serde_json::from_str(&json).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", meta.format_version)));
    }
    if meta.kind != kind {
        return Err(Error::SpecMismatch(format!(
            "expected a {kind} checkpoint, found {}",
            meta.kind
        )));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != meta.num_params * 4 {
        return Err(corrupt(format!(
            "blob holds {} bytes, metadata declares {} parameters",
            bytes.len(),
            meta.num_params
        )));
    }
    if crate::tensor::digest_hex(&bytes) != meta.sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let flat = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((meta, flat))
}

/// Splits `flat` across `modules` in order.
pub fn load_into(path: &Path, flat: &[f32], modules: &mut [&mut dyn Module]) -> Result<()> {
    let total: usize = modules.iter().map(|m| m.num_params()).sum();
    if total != flat.len() {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("expected {total} parameters, found {}", flat.len()),
        });
    }
    let mut off = 0;
    for m in modules.iter_mut() {
        let n = m.num_params();
        m.load_flat_weights(&flat[off..off + n]);
        off += n;
    }
    Ok(())
}
