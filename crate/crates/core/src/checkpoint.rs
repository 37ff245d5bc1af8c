//! Checkpoint directories: `weights.bin` holds little-endian `f32` parameters
//! followed by the Adam moments, `manifest.json` describes them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::{ModelConfig, ModelParams};
use crate::training::{AdamState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub step: u64,
    pub adam_t: u64,
    pub has_optimizer: bool,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// SHA-256 of `weights.bin`.
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything restored from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    pub train: Option<TrainConfig>,
    pub sha256: String,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a checkpoint into `dir` (created if needed) and returns the
/// weights hash.
pub fn save(
    dir: &Path,
    params: &ModelParams<f32>,
    optimizer: Option<&AdamState>,
    step: u64,
    train: Option<&TrainConfig>,
) -> Result<String> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.count_params() * 12);
    for v in params.to_flat() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(opt) = optimizer {
        for moments in [&opt.m, &opt.v] {
            for v in moments.iter().flatten() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step,
        adam_t: optimizer.map_or(0, |o| o.t),
        has_optimizer: optimizer.is_some(),
        model: params.config().clone(),
        train: train.cloned(),
        sha256: sha256.clone(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
            })
            .collect(),
    };
    fs::write(dir.join(WEIGHTS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(sha256)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ckpt_err(&path, e.to_string()))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found > FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found,
            supported: FORMAT_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| ckpt_err(&path, e.to_string()))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&path).map_err(|e| ckpt_err(&path, e.to_string()))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if digest != manifest.sha256 {
        return Err(ckpt_err(&path, format!("checksum mismatch: manifest {}, file {digest}", manifest.sha256)));
    }
    let mut params = ModelParams::<f32>::init(&manifest.model, 0)?;
    let layout: Vec<TensorEntry> = params
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
        })
        .collect();
    if layout != manifest.tensors {
        return Err(ckpt_err(dir, "tensor layout does not match the model config"));
    }
    let n = params.count_params();
    let want = if manifest.has_optimizer { 3 * n } else { n } * 4;
    if bytes.len() != want {
        return Err(ckpt_err(&path, format!("expected {want} bytes, found {}", bytes.len())));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    params.load_flat(&floats[..n])?;
    let optimizer = manifest.has_optimizer.then(|| {
        let split = |flat: &[f32]| {
            let mut off = 0;
            params
                .iter()
                .map(|p| {
                    let len = p.value.len();
                    off += len;
                    flat[off - len..off].to_vec()
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            m: split(&floats[n..2 * n]),
            v: split(&floats[2 * n..]),
            t: manifest.adam_t,
        }
    });
    Ok(Checkpoint {
        params,
        optimizer,
        step: manifest.step,
        train: manifest.train,
        sha256: digest,
    })
}
