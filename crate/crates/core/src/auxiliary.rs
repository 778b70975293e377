//! Auxiliary classifier trained on MAE reconstructions of the victim's
//! training data to reproduce the victim's output distribution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{fit_soft_targets, ClassifierModel, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::mae::{sample_mask, MAEModel, MaskMatrix};
use crate::par::Execution;
use crate::rng::RngHandle;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuxProvenance {
    pub mae_hash: String,
    pub victim_hash: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryModel {
    pub model: ClassifierModel,
    pub provenance: AuxProvenance,
}

impl AuxiliaryModel {
    fn provenance_path(stem: &Path) -> std::path::PathBuf {
        stem.with_extension("provenance.json")
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        self.model.save(stem)?;
        let p = Self::provenance_path(stem);
        std::fs::write(&p, serde_json::to_vec_pretty(&self.provenance)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let model = ClassifierModel::load(stem)?;
        let p = Self::provenance_path(stem);
        let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(Self {
            model,
            provenance: serde_json::from_slice(&raw)?,
        })
    }
}

/// Reconstructs every sample with a fresh mask; labels are carried over.
pub fn build_reconstructed_dataset(mae: &MAEModel, data: &LabeledDataset, rng: &RngHandle) -> Result<LabeledDataset> {
    if data.is_empty() {
        return Err(Error::invalid("cannot reconstruct an empty dataset"));
    }
    let masks: Vec<MaskMatrix> = (0..data.len())
        .map(|i| sample_mask(mae.num_patches(), mae.mask_ratio(), &rng.derive_indexed("sample", i as u64)))
        .collect::<Result<_>>()?;
    let recon = mae.reconstruct_batch(Execution::default(), data.samples(), &masks)?;
    data.with_samples(format!("{}-reconstructed", data.name), recon)
}

/// Mean squared difference between two probability vectors.
pub fn deviation_error(p_victim: &[f32], p_aux: &[f32]) -> Result<f64> {
    if p_victim.len() != p_aux.len() || p_victim.is_empty() {
        return Err(Error::shape(p_victim.len(), p_aux.len()));
    }
    let s: f64 = p_victim
        .iter()
        .zip(p_aux)
        .map(|(a, b)| {
            let d = (*a - *b) as f64;
            d * d
        })
        .sum();
    Ok(s / p_victim.len() as f64)
}

/// Trains a freshly initialized copy of the victim architecture so that its
/// output on `recon[i]` matches the victim's output on `original[i]`.
pub fn train_auxiliary(victim: &ClassifierModel, original: &LabeledDataset, recon: &LabeledDataset, mae: &MAEModel, cfg: &TrainConfig) -> Result<AuxiliaryModel> {
    let init = ClassifierModel::init(
        victim.architecture(),
        victim.input_shape(),
        victim.num_classes(),
        &RngHandle::new(cfg.seed, "auxiliary/init"),
    )?;
    fit_auxiliary(init, victim, original, recon, &mae.content_hash(), cfg)
}

/// Same objective as [`train_auxiliary`] starting from `init`.
pub fn fit_auxiliary(
    mut init: ClassifierModel,
    victim: &ClassifierModel,
    original: &LabeledDataset,
    recon: &LabeledDataset,
    mae_hash: &str,
    cfg: &TrainConfig,
) -> Result<AuxiliaryModel> {
    if init.num_classes() != victim.num_classes() {
        return Err(Error::invalid(format!(
            "auxiliary has {} classes, victim has {}",
            init.num_classes(),
            victim.num_classes()
        )));
    }
    if original.len() != recon.len() {
        return Err(Error::Consistency(format!(
            "{} originals but {} reconstructions",
            original.len(),
            recon.len()
        )));
    }
    if original.labels() != recon.labels() {
        return Err(Error::Consistency("reconstructed dataset is not aligned with the original".into()));
    }
    let targets = victim.predict_dataset(original)?;
    fit_soft_targets(&mut init, recon.samples(), &targets, cfg, recon.fingerprint())?;
    Ok(AuxiliaryModel {
        model: init,
        provenance: AuxProvenance {
            mae_hash: mae_hash.to_string(),
            victim_hash: victim.content_hash(),
            seed: cfg.seed,
        },
    })
}

/// Mean L_aux over a dataset: victim output on originals versus auxiliary
/// output on reconstructions.
pub fn auxiliary_loss(victim: &ClassifierModel, aux: &ClassifierModel, original: &LabeledDataset, recon: &LabeledDataset) -> Result<f64> {
    let pv = victim.predict_dataset(original)?;
    let pa = aux.predict_dataset(recon)?;
    let mut total = 0.0;
    for (a, b) in pv.iter().zip(&pa) {
        total += deviation_error(a, b)?;
    }
    Ok(total / pv.len() as f64)
}
