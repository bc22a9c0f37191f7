//! Named-tensor checkpoints: `manifest.json` plus raw little-endian f64 data
//! in `tensors.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{FaceError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TENSORS: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest<M> {
    format_version: u32,
    tensors_sha256: String,
    tensors: Vec<TensorEntry>,
    meta: M,
}

/// Writes `meta` and `tensors` into `dir`, replacing any earlier contents.
/// The tensor file is written first and the manifest last, so a directory
/// with a manifest is complete.
pub fn write_checkpoint<M: Serialize>(dir: &Path, meta: &M, tensors: &[(String, &Mat)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FaceError::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| FaceError::io(&manifest_path, e))?;
    }
    let total: usize = tensors.iter().map(|(_, m)| m.len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, m) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.nrows(), m.ncols()],
            offset,
        });
        for v in m.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += m.len();
    }
    let tensor_path = dir.join(TENSORS);
    fs::write(&tensor_path, &bytes).map_err(|e| FaceError::io(&tensor_path, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tensors_sha256: hex::encode(Sha256::digest(&bytes)),
        tensors: entries,
        meta,
    };
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, body + "\n").map_err(|e| FaceError::io(&manifest_path, e))
}

/// Reads a checkpoint written by [`write_checkpoint`], verifying the tensor
/// hash and every tensor's extent.
pub fn read_checkpoint<M: DeserializeOwned>(dir: &Path) -> Result<(M, Vec<(String, Mat)>)> {
    let manifest_path = dir.join(MANIFEST);
    let body = fs::read_to_string(&manifest_path).map_err(|e| FaceError::io(&manifest_path, e))?;
    let manifest: Manifest<M> = serde_json::from_str(&body)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FaceError::Checkpoint(format!(
            "{}: unsupported format version {}",
            dir.display(),
            manifest.format_version
        )));
    }
    let tensor_path = dir.join(TENSORS);
    let bytes = fs::read(&tensor_path).map_err(|e| FaceError::io(&tensor_path, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.tensors_sha256 {
        return Err(FaceError::Checkpoint(format!("{}: tensor data hash mismatch", dir.display())));
    }
    if bytes.len() % 8 != 0 {
        return Err(FaceError::Checkpoint(format!("{}: truncated tensor data", dir.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let [rows, cols] = entry.shape;
        let end = entry.offset + rows * cols;
        if end > values.len() {
            return Err(FaceError::Checkpoint(format!(
                "{}: tensor {} extends past the data",
                dir.display(),
                entry.name
            )));
        }
        let m = Array2::from_shape_vec((rows, cols), values[entry.offset..end].to_vec())
            .map_err(|e| FaceError::Checkpoint(e.to_string()))?;
        tensors.push((entry.name, m));
    }
    Ok((manifest.meta, tensors))
}

/// `root/stageN/epochM`.
pub fn epoch_dir(root: &Path, stage: u8, epoch: usize) -> PathBuf {
    root.join(format!("stage{stage}")).join(format!("epoch{epoch}"))
}

/// `root/stageN/final`.
pub fn final_dir(root: &Path, stage: u8) -> PathBuf {
    root.join(format!("stage{stage}")).join("final")
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file() && dir.join(TENSORS).is_file()
}

/// The highest complete `(stage, epoch, path)` under `root`, if any.
pub fn latest_epoch(root: &Path) -> Option<(u8, usize, PathBuf)> {
    let mut best: Option<(u8, usize, PathBuf)> = None;
    for stage in 1..=3u8 {
        let Ok(entries) = fs::read_dir(root.join(format!("stage{stage}"))) else {
            continue;
        };
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(epoch) = name.to_str().and_then(|n| n.strip_prefix("epoch")).and_then(|n| n.parse().ok())
            else {
                continue;
            };
            if is_complete(&entry.path()) && best.as_ref().is_none_or(|b| (stage, epoch) > (b.0, b.1)) {
                best = Some((stage, epoch, entry.path()));
            }
        }
    }
    best
}
