//! Checkpoint files: `<stem>.json` manifest + `<stem>.bin` flat little-endian
//! float32 weights. Manifests carry the SHA-256 of the weight payload.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn params_hash(params: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in params {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn write_checkpoint<M: Serialize>(stem: &Path, manifest: &M, params: &[f32]) -> Result<()> {
    let (mp, bp) = paths(stem);
    if let Some(dir) = mp.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes: Vec<u8> = params.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bp, bytes).map_err(|e| Error::io(&bp, e))?;
    std::fs::write(&mp, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&mp, e))
}

/// Reads a checkpoint and checks the payload against `expected_hash(manifest)`.
pub fn read_checkpoint<M: DeserializeOwned>(stem: &Path, expected_hash: impl Fn(&M) -> &str) -> Result<(M, Vec<f32>)> {
    let (mp, bp) = paths(stem);
    let raw = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: M = serde_json::from_slice(&raw)?;
    let bytes = std::fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: payload not a float32 array", bp.display())));
    }
    let params: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let got = params_hash(&params);
    if got != expected_hash(&manifest) {
        return Err(Error::Consistency(format!(
            "{}: content hash {got} does not match manifest",
            bp.display()
        )));
    }
    Ok((manifest, params))
}

pub fn exists(stem: &Path) -> bool {
    let (mp, bp) = paths(stem);
    mp.exists() && bp.exists()
}
