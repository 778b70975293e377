//! Outlier Exposure and ensemble-disagreement baselines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{gather, gradient_at, sgd_epochs, Architecture, ClassifierModel, TrainConfig, TrainingManifest};
use crate::data::{ImageTensor, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::loss::{cross_entropy, softmax, softmax_backward, uniform_cross_entropy};
use crate::par::Execution;
use crate::rng::RngHandle;

#[derive(Clone, Debug, PartialEq)]
pub struct OEModel {
    pub model: ClassifierModel,
    pub gamma: f64,
    pub outlier_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct OeSidecar {
    gamma: f64,
    outlier_fingerprint: String,
}

impl OEModel {
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.model.save(stem)?;
        let p = stem.with_extension("oe.json");
        let side = OeSidecar {
            gamma: self.gamma,
            outlier_fingerprint: self.outlier_fingerprint.clone(),
        };
        std::fs::write(&p, serde_json::to_vec_pretty(&side)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let model = ClassifierModel::load(stem)?;
        let p = stem.with_extension("oe.json");
        let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let side: OeSidecar = serde_json::from_slice(&raw)?;
        Ok(Self {
            model,
            gamma: side.gamma,
            outlier_fingerprint: side.outlier_fingerprint,
        })
    }
}

fn check_pair(data: &LabeledDataset, outliers: &LabeledDataset) -> Result<()> {
    if data.is_empty() || outliers.is_empty() {
        return Err(Error::invalid("training and outlier sets must be non-empty"));
    }
    if data.shape() != outliers.shape() {
        return Err(Error::shape(data.shape(), outliers.shape()));
    }
    if data.fingerprint() == outliers.fingerprint() {
        return Err(Error::invalid("outlier set must differ from the training set"));
    }
    Ok(())
}

/// Outlier indices for minibatch `step`: a fixed shuffled cycle through the
/// outlier set, `len` at a time.
fn outlier_batch(order: &[usize], step: usize, len: usize) -> Vec<usize> {
    (0..len).map(|j| order[(step * len + j) % order.len()]).collect()
}

/// Cross-entropy on `data` plus `gamma` times cross-entropy to the uniform
/// distribution on `outliers`.
pub fn train_oe(arch: Architecture, data: &LabeledDataset, outliers: &LabeledDataset, gamma: f64, cfg: &TrainConfig) -> Result<OEModel> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    check_pair(data, outliers)?;
    let mut model = ClassifierModel::init(arch, data.shape(), data.num_classes(), &RngHandle::new(cfg.seed, "classifier/init"))?;
    let classes = model.num_classes();
    let (net, input, params) = model.split();
    let mut order: Vec<usize> = (0..outliers.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut RngHandle::new(cfg.seed, "oe/outliers").rng());
    let (labels, samples) = (data.labels(), data.samples());
    let g32 = gamma as f32;
    let mut step = 0;
    let losses = sgd_epochs(params, data.len(), cfg, "classifier/shuffle", |p, batch| {
        let x = gather(samples, batch);
        let denom = batch.len() as f32;
        let (mut loss, mut g) = gradient_at(&net, input, p, Execution::default(), &x, batch.len(), |r, logits| {
            let y: Vec<usize> = batch[r].iter().map(|&i| labels[i]).collect();
            cross_entropy(&y, logits, classes, denom)
        });
        if gamma > 0.0 {
            let ob = outlier_batch(&order, step, batch.len());
            let xo = gather(outliers.samples(), &ob);
            let (lo, go) = gradient_at(&net, input, p, Execution::default(), &xo, ob.len(), |_, logits| {
                uniform_cross_entropy(logits, classes, denom)
            });
            loss += g32 * lo;
            g.iter_mut().zip(&go).for_each(|(a, b)| *a += g32 * b);
        }
        step += 1;
        (loss, g)
    })?;
    model.manifest = TrainingManifest {
        seed: cfg.seed,
        epochs: cfg.epochs,
        dataset_fingerprint: data.fingerprint(),
        loss: Some(cfg.loss),
        epoch_losses: losses,
    };
    Ok(OEModel {
        model,
        gamma,
        outlier_fingerprint: outliers.fingerprint(),
    })
}

/// One minus the maximum softmax probability.
pub fn oe_score(model: &OEModel, x: &ImageTensor) -> Result<f64> {
    let p = model.model.predict(x)?;
    Ok(msp_complement(&p))
}

pub fn oe_score_batch(model: &OEModel, xs: &[ImageTensor]) -> Result<Vec<f64>> {
    Ok(model.model.predict_batch(xs)?.iter().map(|p| msp_complement(p)).collect())
}

fn msp_complement(p: &[f32]) -> f64 {
    1.0 - p.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct EDMEnsemble {
    pub members: Vec<ClassifierModel>,
    pub gamma: f64,
    pub outlier_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct EnsembleManifest {
    kind: String,
    members: usize,
    gamma: f64,
    seeds: Vec<u64>,
    outlier_fingerprint: String,
    member_hashes: Vec<String>,
}

impl EDMEnsemble {
    pub fn save(&self, stem: &Path) -> Result<()> {
        for (i, m) in self.members.iter().enumerate() {
            m.save(&member_stem(stem, i))?;
        }
        let man = EnsembleManifest {
            kind: "edm".into(),
            members: self.members.len(),
            gamma: self.gamma,
            seeds: self.members.iter().map(|m| m.manifest.seed).collect(),
            outlier_fingerprint: self.outlier_fingerprint.clone(),
            member_hashes: self.members.iter().map(ClassifierModel::content_hash).collect(),
        };
        let p = stem.with_extension("json");
        std::fs::write(&p, serde_json::to_vec_pretty(&man)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let p = stem.with_extension("json");
        let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let man: EnsembleManifest = serde_json::from_slice(&raw)?;
        if man.kind != "edm" {
            return Err(Error::Format(format!("expected an edm manifest, found `{}`", man.kind)));
        }
        let members = (0..man.members)
            .map(|i| ClassifierModel::load(&member_stem(stem, i)))
            .collect::<Result<Vec<_>>>()?;
        for (m, h) in members.iter().zip(&man.member_hashes) {
            if &m.content_hash() != h {
                return Err(Error::Consistency("ensemble member does not match its manifest".into()));
            }
        }
        Ok(Self {
            members,
            gamma: man.gamma,
            outlier_fingerprint: man.outlier_fingerprint,
        })
    }
}

fn member_stem(stem: &Path, i: usize) -> std::path::PathBuf {
    let name = stem.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    stem.with_file_name(format!("{name}-member{i}"))
}

/// Total-variation distance between two probability vectors.
pub fn total_variation(a: &[f32], b: &[f32]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>()
}

fn mean_pairwise_tv(ps: &[Vec<f32>]) -> f64 {
    let n = ps.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += total_variation(&ps[i], &ps[j]);
        }
    }
    s / (n * (n - 1) / 2) as f64
}

/// Jointly trains `n` members: mean member cross-entropy on `data` plus
/// `gamma` times the negative mean pairwise total-variation distance of the
/// members' outputs on `outliers`.
pub fn train_edm(arch: Architecture, data: &LabeledDataset, outliers: &LabeledDataset, n: usize, gamma: f64, cfg: &TrainConfig) -> Result<EDMEnsemble> {
    if n < 2 {
        return Err(Error::invalid(format!("an ensemble needs at least two members, got {n}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be non-negative, got {gamma}")));
    }
    check_pair(data, outliers)?;
    let root = RngHandle::new(cfg.seed, "edm/init");
    let mut members = (0..n)
        .map(|i| ClassifierModel::init(arch, data.shape(), data.num_classes(), &root.derive_indexed("member", i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let classes = data.num_classes();
    let (net, input, _) = members[0].split();
    let per = members[0].params().len();
    let mut flat: Vec<f32> = members.iter().flat_map(|m| m.params().iter().copied()).collect();
    let mut order: Vec<usize> = (0..outliers.len()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut RngHandle::new(cfg.seed, "edm/outliers").rng());
    let (labels, samples) = (data.labels(), data.samples());
    let pairs = (n * (n - 1) / 2) as f32;
    let g32 = gamma as f32;
    let mut step = 0;
    let losses = sgd_epochs(&mut flat, data.len(), cfg, "edm/shuffle", |p, batch| {
        let x = gather(samples, batch);
        let denom = batch.len() as f32;
        let mut loss = 0.0;
        let mut grad = vec![0.0; p.len()];
        let ob = outlier_batch(&order, step, batch.len());
        let xo = gather(outliers.samples(), &ob);
        let probs: Vec<Vec<f32>> = if gamma > 0.0 {
            (0..n)
                .map(|i| {
                    let mut m = members[i].clone();
                    m.set_params(p[i * per..(i + 1) * per].to_vec());
                    m.logits_flat(&xo, ob.len())
                        .chunks_exact(classes)
                        .flat_map(softmax)
                        .collect()
                })
                .collect()
        } else {
            Vec::new()
        };
        for i in 0..n {
            let pi = &p[i * per..(i + 1) * per];
            let (l, g) = gradient_at(&net, input, pi, Execution::default(), &x, batch.len(), |r, logits| {
                let y: Vec<usize> = batch[r].iter().map(|&k| labels[k]).collect();
                cross_entropy(&y, logits, classes, denom * n as f32)
            });
            loss += l;
            grad[i * per..(i + 1) * per].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            if gamma > 0.0 {
                let (l, g) = gradient_at(&net, input, pi, Execution::default(), &xo, ob.len(), |r, logits| {
                    let mut div = 0.0;
                    let mut dz = Vec::with_capacity(logits.len());
                    for (row, z) in r.zip(logits.chunks_exact(classes)) {
                        let own = softmax(z);
                        let mut dp = vec![0.0f32; classes];
                        for j in (0..n).filter(|j| *j != i) {
                            let other = &probs[j][row * classes..(row + 1) * classes];
                            for k in 0..classes {
                                let d = own[k] - other[k];
                                div -= 0.5 * d.abs() / pairs;
                                dp[k] -= 0.5 * d.signum() / (pairs * denom);
                            }
                        }
                        dz.extend(softmax_backward(&own, &dp));
                    }
                    // pairs are visited from both ends; halve to count each once
                    (div / (2.0 * denom), dz)
                });
                loss += g32 * l;
                grad[i * per..(i + 1) * per].iter_mut().zip(&g).for_each(|(a, b)| *a += g32 * b);
            }
        }
        step += 1;
        (loss, grad)
    })?;
    for (i, m) in members.iter_mut().enumerate() {
        m.set_params(flat[i * per..(i + 1) * per].to_vec());
        m.manifest = TrainingManifest {
            seed: cfg.seed,
            epochs: cfg.epochs,
            dataset_fingerprint: data.fingerprint(),
            loss: Some(cfg.loss),
            epoch_losses: losses.clone(),
        };
    }
    Ok(EDMEnsemble {
        members,
        gamma,
        outlier_fingerprint: outliers.fingerprint(),
    })
}

/// Mean pairwise total-variation distance between member outputs.
pub fn edm_score(ensemble: &EDMEnsemble, x: &ImageTensor) -> Result<f64> {
    let ps = ensemble.members.iter().map(|m| m.predict(x)).collect::<Result<Vec<_>>>()?;
    Ok(mean_pairwise_tv(&ps))
}

pub fn edm_score_batch(ensemble: &EDMEnsemble, xs: &[ImageTensor]) -> Result<Vec<f64>> {
    let per: Vec<Vec<Vec<f32>>> = ensemble.members.iter().map(|m| m.predict_batch(xs)).collect::<Result<_>>()?;
    Ok((0..xs.len())
        .map(|s| mean_pairwise_tv(&per.iter().map(|p| p[s].clone()).collect::<Vec<_>>()))
        .collect())
}
