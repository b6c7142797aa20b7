use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{make_shapes_dataset, ImageBatch, ShapesSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    spec: ShapesSpec,
    n: usize,
    seed: u64,
}

/// Returns the cached dataset for `(spec, n, seed)` under `dir`, generating
/// and writing it on a miss. The blob holds little-endian `f32` pixels
/// followed by `u32` labels.
pub fn load_or_generate(dir: &Path, spec: &ShapesSpec, n: usize, seed: u64) -> Result<ImageBatch> {
    let manifest = Manifest {
        spec: spec.clone(),
        n,
        seed,
    };
    let key = crate::tensor::digest_hex(serde_json::to_string(&manifest)?.as_bytes());
    let stem = format!("shapes-{}", &key[..16]);
    let blob_path = dir.join(format!("{stem}.bin"));
    let json_path = dir.join(format!("{stem}.json"));

    if let (Ok(json), Ok(blob)) = (fs::read_to_string(&json_path), fs::read(&blob_path)) {
        let found: Manifest = serde_json::from_str(&json)?;
        if found == manifest {
            return decode(&blob, spec, n).ok_or_else(|| Error::CorruptCheckpoint {
                path: blob_path.clone(),
                reason: "dataset blob has the wrong length".into(),
            });
        }
    }

    let batch = make_shapes_dataset(spec, n, seed)?;
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(batch.pixels.len() * 4 + n * 4);
    for v in batch.pixels.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    for &l in batch.labels.as_deref().unwrap_or_default() {
        blob.extend_from_slice(&(l as u32).to_le_bytes());
    }
    fs::write(&blob_path, blob)?;
    fs::write(&json_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(batch)
}

fn decode(blob: &[u8], spec: &ShapesSpec, n: usize) -> Option<ImageBatch> {
    let s = spec.image_size;
    let npx = n * 3 * s * s;
    if blob.len() != (npx + n) * 4 {
        return None;
    }
    let words: Vec<[u8; 4]> = blob.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    let pixels = words[..npx].iter().map(|w| f32::from_le_bytes(*w)).collect();
    let labels = words[npx..].iter().map(|w| u32::from_le_bytes(*w) as usize).collect();
    Some(ImageBatch::new(Tensor::from_vec(&[n, 3, s, s], pixels), Some(labels)))
}
