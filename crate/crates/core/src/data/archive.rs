//! Internal tensor archive: `<stem>.json` manifest + `<stem>.f32` payload
//! (flat little-endian float32, samples concatenated channel-major).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{ImageTensor, LabeledDataset, Shape};
use crate::error::{Error, Result};

pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u32,
    pub name: String,
    pub shape: Shape,
    pub dtype: String,
    pub count: usize,
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub fingerprint: String,
    /// Free-form provenance (seed, generator, attack config, ...).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("f32"))
}

pub fn save_archive(stem: &Path, data: &LabeledDataset, provenance: serde_json::Value) -> Result<ArchiveManifest> {
    let (mp, pp) = paths(stem);
    if let Some(dir) = mp.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let manifest = ArchiveManifest {
        version: ARCHIVE_VERSION,
        name: data.name.clone(),
        shape: data.shape(),
        dtype: "f32le".into(),
        count: data.len(),
        num_classes: data.num_classes(),
        labels: data.labels().to_vec(),
        fingerprint: data.fingerprint(),
        provenance,
    };
    let payload: Vec<u8> = data.samples().iter().flat_map(|s| s.to_le_bytes()).collect();
    std::fs::write(&pp, payload).map_err(|e| Error::io(&pp, e))?;
    std::fs::write(&mp, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

pub fn load_archive(stem: &Path) -> Result<(LabeledDataset, ArchiveManifest)> {
    let (mp, pp) = paths(stem);
    let raw = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let manifest: ArchiveManifest = serde_json::from_slice(&raw)?;
    if manifest.version != ARCHIVE_VERSION || manifest.dtype != "f32le" {
        return Err(Error::Format(format!(
            "unsupported archive version {} / dtype {}",
            manifest.version, manifest.dtype
        )));
    }
    let bytes = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
    let per = manifest.shape.len();
    if bytes.len() != manifest.count * per * 4 || manifest.labels.len() != manifest.count {
        return Err(Error::Consistency(format!(
            "payload of {} bytes does not hold {} samples of {}",
            bytes.len(),
            manifest.count,
            manifest.shape
        )));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let samples = if per == 0 {
        Vec::new()
    } else {
        floats
            .chunks_exact(per)
            .map(|c| ImageTensor::new(manifest.shape, c.to_vec()))
            .collect::<Result<Vec<_>>>()?
    };
    let data = LabeledDataset::new(
        manifest.name.clone(),
        manifest.num_classes,
        samples,
        manifest.labels.clone(),
    )?;
    if data.fingerprint() != manifest.fingerprint {
        return Err(Error::Consistency(format!(
            "{}: fingerprint mismatch",
            mp.display()
        )));
    }
    Ok((data, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_corpus, CorpusKind};
    use crate::rng::RngHandle;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_synthetic_corpus(&CorpusKind::Digits, 12, Shape::new(1, 28, 28), &RngHandle::new(1, "t")).unwrap();
        let stem = dir.path().join("sub/digits");
        save_archive(&stem, &d, serde_json::json!({"seed": 1})).unwrap();
        let (back, m) = load_archive(&stem).unwrap();
        assert_eq!(back, d);
        assert_eq!(m.provenance["seed"], 1);
    }

    #[test]
    fn corrupt_payload_detected() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_synthetic_corpus(&CorpusKind::Noise, 3, Shape::new(1, 4, 4), &RngHandle::new(1, "t")).unwrap();
        let stem = dir.path().join("n");
        save_archive(&stem, &d, serde_json::Value::Null).unwrap();
        let pp = stem.with_extension("f32");
        let mut b = std::fs::read(&pp).unwrap();
        b[0] ^= 0x01;
        std::fs::write(&pp, &b).unwrap();
        assert!(load_archive(&stem).is_err());
        b.pop();
        std::fs::write(&pp, &b).unwrap();
        assert!(matches!(load_archive(&stem), Err(Error::Consistency(_))));
    }
}
