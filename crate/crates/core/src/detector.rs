//! Anomaly score combining reconstruction error and victim/auxiliary
//! disagreement, plus threshold calibration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auxiliary::{deviation_error, AuxiliaryModel};
use crate::classifier::ClassifierModel;
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::mae::{reconstruction_error, MAEModel};
use crate::par::{self, Execution};

pub const NORMALIZER_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub alpha: f64,
    pub threshold: Option<f64>,
    pub target_fpr: f64,
    pub c_rec: f64,
    pub c_dev: f64,
    /// Clean quantile each term is divided by; 0.5 is the median.
    #[serde(default = "default_norm_quantile")]
    pub norm_quantile: f64,
}

fn default_norm_quantile() -> f64 {
    0.5
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            threshold: None,
            target_fpr: 0.05,
            c_rec: 1.0,
            c_dev: 1.0,
            norm_quantile: default_norm_quantile(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.target_fpr > 0.0 && self.target_fpr < 1.0) {
            return Err(Error::invalid(format!("target fpr {} outside (0, 1)", self.target_fpr)));
        }
        if !(self.norm_quantile > 0.0 && self.norm_quantile < 1.0) {
            return Err(Error::invalid(format!("normalizer quantile {} outside (0, 1)", self.norm_quantile)));
        }
        if !(self.c_rec > 0.0 && self.c_dev > 0.0) {
            return Err(Error::invalid("normalizers must be positive"));
        }
        if self.threshold.is_some_and(|t| !t.is_finite()) {
            return Err(Error::invalid("threshold must be finite"));
        }
        Ok(())
    }

    pub fn combine(&self, c: Components) -> f64 {
        self.alpha * (c.recon_error / self.c_rec) + (1.0 - self.alpha) * (c.deviation_error / self.c_dev)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Benign,
    Malicious,
}

/// The two raw score terms for one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub recon_error: f64,
    pub deviation_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub recon_error: f64,
    pub deviation_error: f64,
    pub score: f64,
    /// `None` until a threshold is known.
    pub verdict: Option<Verdict>,
    /// Unix milliseconds; set by the serving layer, absent in offline scoring.
    pub received_at_ms: Option<u64>,
    pub scored_at_ms: Option<u64>,
    pub query_fingerprint: String,
}

/// Malicious iff `score > threshold`.
pub fn classify_query(record: &AnomalyRecord, threshold: f64) -> Verdict {
    if record.score > threshold {
        Verdict::Malicious
    } else {
        Verdict::Benign
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Medians of the clean terms, floored at [`NORMALIZER_FLOOR`].
pub fn fit_normalizers(clean_recon: &[f64], clean_dev: &[f64]) -> Result<(f64, f64)> {
    fit_normalizers_at(clean_recon, clean_dev, 0.5)
}

/// Like [`fit_normalizers`] but at clean quantile `q`. `q = 0.5` is the
/// median; anything else uses the nearest-rank quantile.
pub fn fit_normalizers_at(clean_recon: &[f64], clean_dev: &[f64], q: f64) -> Result<(f64, f64)> {
    if clean_recon.is_empty() || clean_dev.is_empty() {
        return Err(Error::invalid("normalizers need clean scores"));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("normalizer quantile {q} outside (0, 1)")));
    }
    let stat = |v: &[f64]| {
        if q == 0.5 {
            median(v)
        } else {
            nearest_rank(v, q)
        }
    };
    Ok((stat(clean_recon).max(NORMALIZER_FLOOR), stat(clean_dev).max(NORMALIZER_FLOOR)))
}

fn nearest_rank(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    // The epsilon keeps exact products such as 0.95 * 100 on the intended rank.
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    s[rank - 1]
}

/// Nearest-rank `(1 - target_fpr)` quantile of the clean scores.
pub fn calibrate_threshold(clean_scores: &[f64], target_fpr: f64) -> Result<f64> {
    if clean_scores.is_empty() {
        return Err(Error::invalid("calibration needs clean scores"));
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::invalid(format!("target fpr {target_fpr} outside (0, 1)")));
    }
    if clean_scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("clean scores must be finite"));
    }
    Ok(nearest_rank(clean_scores, 1.0 - target_fpr))
}

/// Victim, MAE and auxiliary model assembled with a scoring configuration.
#[derive(Clone, Debug)]
pub struct Detector {
    pub victim: ClassifierModel,
    pub mae: MAEModel,
    pub aux: AuxiliaryModel,
    pub cfg: DetectorConfig,
}

impl Detector {
    /// Fails unless the auxiliary model was trained against exactly this
    /// victim and MAE.
    pub fn assemble(victim: ClassifierModel, mae: MAEModel, aux: AuxiliaryModel, cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let (vh, mh) = (victim.content_hash(), mae.content_hash());
        if aux.provenance.victim_hash != vh {
            return Err(Error::Provenance(format!(
                "auxiliary model was trained against victim {}, got {vh}",
                aux.provenance.victim_hash
            )));
        }
        if aux.provenance.mae_hash != mh {
            return Err(Error::Provenance(format!(
                "auxiliary model was trained against mae {}, got {mh}",
                aux.provenance.mae_hash
            )));
        }
        if victim.input_shape() != mae.input_shape() || victim.input_shape() != aux.model.input_shape() {
            return Err(Error::Provenance("models disagree on the input shape".into()));
        }
        Ok(Self { victim, mae, aux, cfg })
    }

    pub fn components(&self, x: &ImageTensor) -> Result<Components> {
        Ok(self.components_batch(Execution::Sequential, std::slice::from_ref(x))?[0])
    }

    pub fn components_batch(&self, exec: Execution, xs: &[ImageTensor]) -> Result<Vec<Components>> {
        let chunks = par::chunks(xs.len(), 32);
        let parts = par::map(exec, &chunks, |r| -> Result<Vec<Components>> {
            let xr = &xs[r.clone()];
            let masks: Vec<_> = xr.iter().map(|x| self.mae.scoring_mask(x)).collect();
            let recon = self.mae.reconstruct_batch(Execution::Sequential, xr, &masks)?;
            let pv = self.victim.predict_batch_with(Execution::Sequential, xr)?;
            let pa = self.aux.model.predict_batch_with(Execution::Sequential, &recon)?;
            xr.iter()
                .zip(&recon)
                .zip(pv.iter().zip(&pa))
                .map(|((x, xh), (a, b))| {
                    Ok(Components {
                        recon_error: reconstruction_error(x, xh)?,
                        deviation_error: deviation_error(a, b)?,
                    })
                })
                .collect()
        });
        let mut out = Vec::with_capacity(xs.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn record(&self, x: &ImageTensor, c: Components) -> AnomalyRecord {
        let score = self.cfg.combine(c);
        AnomalyRecord {
            recon_error: c.recon_error,
            deviation_error: c.deviation_error,
            score,
            verdict: self.cfg.threshold.map(|t| if score > t { Verdict::Malicious } else { Verdict::Benign }),
            received_at_ms: None,
            scored_at_ms: None,
            query_fingerprint: hex::encode(x.digest()),
        }
    }

    /// Fits normalizers and the threshold on clean calibration queries.
    pub fn calibrate(&mut self, clean: &[ImageTensor]) -> Result<()> {
        let comps = self.components_batch(Execution::default(), clean)?;
        self.calibrate_from(&comps)
    }

    pub fn calibrate_from(&mut self, clean: &[Components]) -> Result<()> {
        let rec: Vec<f64> = clean.iter().map(|c| c.recon_error).collect();
        let dev: Vec<f64> = clean.iter().map(|c| c.deviation_error).collect();
        let (c_rec, c_dev) = fit_normalizers_at(&rec, &dev, self.cfg.norm_quantile)?;
        self.cfg.c_rec = c_rec;
        self.cfg.c_dev = c_dev;
        let scores: Vec<f64> = clean.iter().map(|c| self.cfg.combine(*c)).collect();
        self.cfg.threshold = Some(calibrate_threshold(&scores, self.cfg.target_fpr)?);
        Ok(())
    }
}

pub fn anomaly_score(x: &ImageTensor, detector: &Detector) -> Result<AnomalyRecord> {
    let c = detector.components(x)?;
    Ok(detector.record(x, c))
}

/// On-disk detector description: checkpoint locations and hashes plus the
/// calibrated configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorBundle {
    pub version: u32,
    pub victim: CheckpointRef,
    pub mae: CheckpointRef,
    pub auxiliary: CheckpointRef,
    pub config: DetectorConfig,
    pub calibration_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    /// Checkpoint stem, relative to the bundle file's directory.
    pub path: PathBuf,
    pub content_hash: String,
}

impl DetectorBundle {
    pub const VERSION: u32 = 1;

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let b: Self = serde_json::from_slice(&raw)?;
        if b.version != Self::VERSION {
            return Err(Error::Format(format!("unsupported detector bundle version {}", b.version)));
        }
        Ok(b)
    }

    /// Loads the referenced checkpoints, checking each against its recorded hash.
    pub fn open(&self, bundle_path: &Path) -> Result<Detector> {
        let base = bundle_path.parent().unwrap_or(Path::new("."));
        let check = |r: &CheckpointRef, got: String| -> Result<()> {
            if r.content_hash != got {
                return Err(Error::Provenance(format!(
                    "{}: hash {got} does not match bundle {}",
                    r.path.display(),
                    r.content_hash
                )));
            }
            Ok(())
        };
        let victim = ClassifierModel::load(&base.join(&self.victim.path))?;
        check(&self.victim, victim.content_hash())?;
        let mae = MAEModel::load(&base.join(&self.mae.path))?;
        check(&self.mae, mae.content_hash())?;
        let aux = AuxiliaryModel::load(&base.join(&self.auxiliary.path))?;
        check(&self.auxiliary, aux.model.content_hash())?;
        if self.config.threshold.is_none() {
            return Err(Error::invalid("detector bundle is not calibrated"));
        }
        Detector::assemble(victim, mae, aux, self.config.clone())
    }
}

/// Saves the detector's three models next to `path` and writes a bundle
/// referencing them.
pub fn write_bundle(det: &Detector, calibration_fingerprint: &str, path: &Path) -> Result<DetectorBundle> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = |name: &str| PathBuf::from(format!("bundle-{name}"));
    det.victim.save(&dir.join(stem("victim")))?;
    det.mae.save(&dir.join(stem("mae")))?;
    det.aux.save(&dir.join(stem("auxiliary")))?;
    let b = DetectorBundle {
        version: DetectorBundle::VERSION,
        victim: CheckpointRef {
            path: stem("victim"),
            content_hash: det.victim.content_hash(),
        },
        mae: CheckpointRef {
            path: stem("mae"),
            content_hash: det.mae.content_hash(),
        },
        auxiliary: CheckpointRef {
            path: stem("auxiliary"),
            content_hash: det.aux.model.content_hash(),
        },
        config: det.cfg.clone(),
        calibration_fingerprint: calibration_fingerprint.to_string(),
    };
    b.save(path)?;
    Ok(b)
}
