//! End-to-end experiments: train the victim and defenses, generate attack
//! queries, score mixed query streams and report detection metrics.
//!
//! Every trained artifact is cached under `<output_dir>/checkpoints` keyed
//! by a hash of its configuration and upstream inputs, so an interrupted
//! run resumes where it stopped and produces the same report.

mod config;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::{
    default_aux_train, default_victim_train, AttackSpec, AuxStageConfig, BaselineConfig, DataConfig, DataSource, DefenseId,
    DetectorStageConfig, EmbeddingSweep, ExperimentConfig, MaeStageConfig, VictimConfig, CONFIG_SCHEMA_VERSION,
};
pub use report::{
    canonical_json, emit_report, percent, DetectorSummary, DynamicsPoint, ExperimentReport, ReportFormat, ReportRow, RuntimeReport,
    SweepPoint, VictimSummary, REPORT_SCHEMA_VERSION,
};

use crate::attack::{dfme_synthesize, jbda_augment, knockoff_select, AttackKind, QuerySet};
use crate::auxiliary::{build_reconstructed_dataset, train_auxiliary, AuxiliaryModel};
use crate::baselines::{edm_score_batch, oe_score_batch, train_edm, train_oe, EDMEnsemble, OEModel};
use crate::classifier::{evaluate_accuracy, train_classifier, ClassifierModel};
use crate::data::{load_idx_dataset, make_synthetic_corpus, split_dataset, CorpusKind, ImageTensor, LabeledDataset};
use crate::detector::{Components, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::mae::{train_mae_with, MAEModel, MAETrainConfig};
use crate::metrics::{auroc, metric_row, ScoredPopulation};
use crate::par::Execution;
use crate::rng::RngHandle;

/// Datasets derived from the config.
pub struct Datasets {
    pub train: LabeledDataset,
    /// Clean held-out queries used for normalizers and the threshold.
    pub calibration: LabeledDataset,
    /// Held-out samples available to the attacker (JBDA seeds).
    pub attacker: LabeledDataset,
    /// Clean held-out queries mixed into evaluation streams.
    pub evaluation: LabeledDataset,
    pub outliers: LabeledDataset,
    /// Uniform-noise images for reconstruction dynamics.
    pub probe: LabeledDataset,
}

impl Datasets {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let root = RngHandle::new(cfg.seed, "data");
        let d = &cfg.data;
        let (train, test) = match &d.source {
            DataSource::Synthetic {
                train_count,
                test_count,
                shape,
            } => (
                make_synthetic_corpus(&CorpusKind::Digits, *train_count, *shape, &root.derive("train"))?,
                make_synthetic_corpus(&CorpusKind::Digits, *test_count, *shape, &root.derive("test"))?,
            ),
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (load_idx_dataset(train_images, train_labels)?, load_idx_dataset(test_images, test_labels)?),
        };
        if train.shape() != test.shape() {
            return Err(Error::shape(train.shape(), test.shape()));
        }
        let n = test.len() as f64;
        let reserved = d.calibration_count + d.attacker_count;
        if reserved >= test.len() {
            return Err(Error::invalid(format!(
                "held-out split has {} samples but {reserved} are reserved for calibration and attacker seeds",
                test.len()
            )));
        }
        let fc = d.calibration_count as f64 / n;
        let fa = d.attacker_count as f64 / n;
        let mut parts = split_dataset(&test, &[fc, fa, 1.0 - fc - fa], &root.derive("held-out"))?.into_iter();
        let (mut calibration, mut attacker, mut evaluation) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        calibration.name = "calibration".into();
        attacker.name = "attacker".into();
        evaluation.name = "evaluation".into();
        let outliers = make_synthetic_corpus(&d.outlier_corpus, d.outlier_count, train.shape(), &root.derive("outliers"))?;
        let probe = make_synthetic_corpus(&CorpusKind::Noise, d.probe_count, train.shape(), &root.derive("probe"))?;
        Ok(Self {
            train,
            calibration,
            attacker,
            evaluation,
            outliers,
            probe,
        })
    }

    /// Proxy corpus for a knockoff attack; drawn from its own stream so it
    /// never coincides with the outlier set.
    pub fn proxy(&self, cfg: &ExperimentConfig, kind: &str) -> Result<LabeledDataset> {
        let kind: CorpusKind = kind.parse()?;
        let count = cfg.data.proxy_count.unwrap_or(2 * cfg.max_budget());
        make_synthetic_corpus(&kind, count, self.train.shape(), &RngHandle::new(cfg.seed, "data").derive("proxy").derive(kind.as_str()))
    }
}

/// Short hash of a stage's inputs.
fn stage_key(inputs: serde_json::Value) -> String {
    let bytes = serde_json::to_vec(&inputs).expect("json values serialize");
    hex::encode(Sha256::digest(bytes))[..16].to_string()
}

/// Cache location for one stage: `<dir>/<name>-<key>`, with a `.done`
/// marker written only after the artifact is fully saved.
struct Stage {
    stem: PathBuf,
}

impl Stage {
    fn new(dir: &Path, name: &str, key: String) -> Self {
        Self {
            stem: dir.join(format!("{name}-{key}")),
        }
    }

    fn marker(&self) -> PathBuf {
        self.stem.with_extension("done")
    }

    fn cached(&self) -> bool {
        self.marker().exists()
    }

    fn finish(&self) -> Result<()> {
        let m = self.marker();
        std::fs::write(&m, b"").map_err(|e| Error::io(&m, e))
    }

    fn sidecar(&self, ext: &str) -> PathBuf {
        self.stem.with_extension(ext)
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&raw)?)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Config, datasets and checkpoint cache. Each stage method trains its
/// model on first use and loads it from the cache afterwards.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub data: Datasets,
    pub dir: PathBuf,
    pub exec: Execution,
}

impl Workspace {
    /// Validates the config and builds the datasets; trains nothing.
    pub fn open(cfg: ExperimentConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        let data = Datasets::build(&cfg)?;
        let dir = cfg.output_dir.join("checkpoints");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { cfg, data, dir, exec })
    }

    /// The victim and its checkpoint stem.
    pub fn victim(&self) -> Result<(ClassifierModel, PathBuf)> {
        let (cfg, data) = (&self.cfg, &self.data);
        let (victim, stem) = match &cfg.victim.checkpoint {
            Some(stem) => (ClassifierModel::load(stem)?, stem.clone()),
            None => {
                let st = Stage::new(&self.dir, "victim", stage_key(json!(["victim", data.train.fingerprint(), cfg.victim.arch, cfg.victim.train])));
                if st.cached() {
                    (ClassifierModel::load(&st.stem)?, st.stem)
                } else {
                    tracing::info!("training victim");
                    let m = train_classifier(cfg.victim.arch, &data.train, &cfg.victim.train)?;
                    m.save(&st.stem)?;
                    st.finish()?;
                    (m, st.stem)
                }
            }
        };
        if victim.input_shape() != data.train.shape() || victim.num_classes() != data.train.num_classes() {
            return Err(Error::shape(
                format!("{} / {} classes", data.train.shape(), data.train.num_classes()),
                format!("{} / {} classes", victim.input_shape(), victim.num_classes()),
            ));
        }
        Ok((victim, stem))
    }

    /// The MAE, its reconstruction dynamics and its checkpoint stem.
    pub fn mae(&self) -> Result<(MAEModel, Vec<DynamicsPoint>, PathBuf)> {
        match &self.cfg.mae.checkpoint {
            Some(stem) => {
                let mae = MAEModel::load(stem)?;
                let d = dynamics_point(&mae, mae.manifest.epochs, &self.data, self.exec)?;
                Ok((mae, vec![d], stem.clone()))
            }
            None => train_mae_cached(
                &self.dir,
                "mae",
                &self.cfg.mae.train,
                &self.cfg.mae.snapshot_epochs,
                &self.data.train,
                Some(&self.data),
                self.exec,
            ),
        }
    }

    pub fn auxiliary(&self, victim: &ClassifierModel, mae: &MAEModel) -> Result<(AuxiliaryModel, PathBuf)> {
        let (cfg, data) = (&self.cfg, &self.data);
        if let Some(stem) = &cfg.auxiliary.checkpoint {
            return Ok((AuxiliaryModel::load(stem)?, stem.clone()));
        }
        let st = Stage::new(
            &self.dir,
            "auxiliary",
            stage_key(json!(["auxiliary", data.train.fingerprint(), victim.content_hash(), mae.content_hash(), cfg.auxiliary.train])),
        );
        if st.cached() {
            return Ok((AuxiliaryModel::load(&st.stem)?, st.stem));
        }
        tracing::info!("training auxiliary model");
        let recon = build_reconstructed_dataset(mae, &data.train, &RngHandle::new(cfg.auxiliary.train.seed, "auxiliary/recon"))?;
        let a = train_auxiliary(victim, &data.train, &recon, mae, &cfg.auxiliary.train)?;
        a.save(&st.stem)?;
        st.finish()?;
        Ok((a, st.stem))
    }

    /// Assembles the detector and calibrates it on the calibration split.
    pub fn detector(&self, victim: ClassifierModel, mae: MAEModel, aux: AuxiliaryModel) -> Result<Detector> {
        let det_cfg = DetectorConfig {
            alpha: self.cfg.detector.alpha,
            target_fpr: self.cfg.detector.target_fpr,
            norm_quantile: self.cfg.detector.norm_quantile,
            ..DetectorConfig::default()
        };
        let mut detector = Detector::assemble(victim, mae, aux, det_cfg)?;
        let cal = detector.components_batch(self.exec, self.data.calibration.samples())?;
        detector.calibrate_from(&cal)?;
        Ok(detector)
    }

    pub fn oe(&self) -> Result<(OEModel, PathBuf)> {
        let (cfg, data, b) = (&self.cfg, &self.data, &self.cfg.baselines);
        let st = Stage::new(
            &self.dir,
            "oe",
            stage_key(json!(["oe", data.train.fingerprint(), data.outliers.fingerprint(), cfg.victim.arch, b.oe_gamma, b.train])),
        );
        if st.cached() {
            return Ok((OEModel::load(&st.stem)?, st.stem));
        }
        tracing::info!("training outlier-exposure baseline");
        let m = train_oe(cfg.victim.arch, &data.train, &data.outliers, b.oe_gamma, &b.train)?;
        m.save(&st.stem)?;
        st.finish()?;
        Ok((m, st.stem))
    }

    pub fn edm(&self) -> Result<(EDMEnsemble, PathBuf)> {
        let (cfg, data, b) = (&self.cfg, &self.data, &self.cfg.baselines);
        let st = Stage::new(
            &self.dir,
            "edm",
            stage_key(json!(["edm", data.train.fingerprint(), data.outliers.fingerprint(), cfg.victim.arch, b.edm_gamma, b.edm_members, b.train])),
        );
        if st.cached() {
            return Ok((EDMEnsemble::load(&st.stem)?, st.stem));
        }
        tracing::info!("training ensemble baseline");
        let m = train_edm(cfg.victim.arch, &data.train, &data.outliers, b.edm_members, b.edm_gamma, &b.train)?;
        m.save(&st.stem)?;
        st.finish()?;
        Ok((m, st.stem))
    }

    /// Generates (or loads) the queries of one attack at one budget against
    /// `victim`, returning them with their archive stem.
    pub fn queries(&self, victim: &ClassifierModel, spec: &AttackSpec, budget: usize) -> Result<(QuerySet, PathBuf)> {
        let acfg = spec.with_budget(budget);
        let st = Stage::new(
            &self.dir,
            &format!("queries-{}-{budget}", acfg.label()),
            stage_key(json!([
                "queries",
                acfg,
                victim.content_hash(),
                self.data.attacker.fingerprint(),
                self.cfg.data.proxy_count,
                self.cfg.seed
            ])),
        );
        if st.cached() {
            return Ok((QuerySet::load(&st.stem)?, st.stem));
        }
        tracing::info!(attack = %acfg.label(), budget, "generating queries");
        let exec = self.exec;
        let oracle = move |xs: &[ImageTensor]| victim.predict_batch_with(exec, xs);
        let q = match &acfg.kind {
            AttackKind::Knockoff { proxy, .. } => {
                let pool = self.data.proxy(&self.cfg, proxy)?;
                let mut q = knockoff_select(&pool, &acfg)?;
                q.responses = Some(oracle(&q.samples)?);
                q
            }
            AttackKind::Jbda { seed_count, .. } => {
                let seeds = self.data.attacker.take("jbda-seeds", *seed_count);
                let mut sub = ClassifierModel::init(
                    victim.architecture(),
                    victim.input_shape(),
                    victim.num_classes(),
                    &RngHandle::new(acfg.seed, "jbda/substitute"),
                )?;
                jbda_augment(&seeds, &mut sub, &oracle, &acfg)?
            }
            AttackKind::Dfme { .. } => dfme_synthesize(&oracle, victim.input_shape(), victim.num_classes(), &acfg)?,
        };
        if q.len() != budget {
            return Err(Error::Consistency(format!("{} produced {} queries for budget {budget}", acfg.label(), q.len())));
        }
        q.save(&st.stem)?;
        st.finish()?;
        Ok((q, st.stem))
    }
}

/// All trained models of one experiment.
pub struct Pipeline {
    pub ws: Workspace,
    pub victim: ClassifierModel,
    /// Victim hash right after training or loading.
    pub victim_hash: String,
    pub mae: MAEModel,
    pub dynamics: Vec<DynamicsPoint>,
    pub aux: AuxiliaryModel,
    pub detector: Detector,
    pub oe: Option<OEModel>,
    pub edm: Option<EDMEnsemble>,
    pub runtime: BTreeMap<String, f64>,
}

impl Pipeline {
    /// Validates the config, then trains or loads every model.
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        Self::prepare_with(cfg, Execution::default())
    }

    pub fn prepare_with(cfg: ExperimentConfig, exec: Execution) -> Result<Self> {
        let mut runtime = BTreeMap::new();
        let mut clock = Instant::now();
        let mut lap = |name: &str, runtime: &mut BTreeMap<String, f64>| {
            runtime.insert(name.to_string(), clock.elapsed().as_secs_f64());
            clock = Instant::now();
        };
        let ws = Workspace::open(cfg, exec)?;
        lap("data", &mut runtime);
        let (victim, _) = ws.victim()?;
        let victim_hash = victim.content_hash();
        lap("victim", &mut runtime);
        let (mae, dynamics, _) = ws.mae()?;
        lap("mae", &mut runtime);
        let (aux, _) = ws.auxiliary(&victim, &mae)?;
        lap("auxiliary", &mut runtime);
        let detector = ws.detector(victim.clone(), mae.clone(), aux.clone())?;
        lap("calibration", &mut runtime);
        let oe = if ws.cfg.defenses.contains(&DefenseId::Oe) { Some(ws.oe()?.0) } else { None };
        lap("oe", &mut runtime);
        let edm = if ws.cfg.defenses.contains(&DefenseId::Edm) { Some(ws.edm()?.0) } else { None };
        lap("edm", &mut runtime);
        Ok(Self {
            ws,
            victim,
            victim_hash,
            mae,
            dynamics,
            aux,
            detector,
            oe,
            edm,
            runtime,
        })
    }

    pub fn queries(&self, spec: &AttackSpec, budget: usize) -> Result<QuerySet> {
        Ok(self.ws.queries(&self.victim, spec, budget)?.0)
    }

    /// Detector configuration of a SAME variant, calibrated on the same
    /// clean data as the main detector.
    pub fn variant(&self, defense: DefenseId) -> Result<DetectorConfig> {
        let alpha = match defense {
            DefenseId::Same => return Ok(self.detector.cfg.clone()),
            DefenseId::SameX => 1.0,
            DefenseId::SameY => 0.0,
            _ => return Err(Error::invalid(format!("{} is not a SAME variant", defense.as_str()))),
        };
        let mut d = self.detector.clone();
        d.cfg.alpha = alpha;
        let cal = d.components_batch(self.ws.exec, self.ws.data.calibration.samples())?;
        d.calibrate_from(&cal)?;
        Ok(d.cfg)
    }

    /// Anomaly scores of `xs` under every configured defense.
    pub fn score_all(&self, xs: &[ImageTensor]) -> Result<BTreeMap<DefenseId, Vec<f64>>> {
        let mut out = BTreeMap::new();
        let needs_same = self.ws.cfg.defenses.iter().any(|d| matches!(d, DefenseId::Same | DefenseId::SameX | DefenseId::SameY));
        let comps: Vec<Components> = if needs_same {
            self.detector.components_batch(self.ws.exec, xs)?
        } else {
            Vec::new()
        };
        for d in &self.ws.cfg.defenses {
            let s = match d {
                DefenseId::Same | DefenseId::SameX | DefenseId::SameY => {
                    let c = self.variant(*d)?;
                    comps.iter().map(|x| c.combine(*x)).collect()
                }
                DefenseId::Oe => oe_score_batch(self.oe.as_ref().expect("oe trained"), xs)?,
                DefenseId::Edm => edm_score_batch(self.edm.as_ref().expect("edm trained"), xs)?,
            };
            out.insert(*d, s);
        }
        Ok(out)
    }

    /// Runs the attack grid and assembles the report.
    pub fn evaluate(&mut self) -> Result<ExperimentReport> {
        let mut clock = Instant::now();
        let cfg = self.ws.cfg.clone();
        let clean = self.score_all(self.ws.data.evaluation.samples())?;
        let p = self.ws.data.evaluation.len();
        let mut rows = Vec::new();
        let mut query_cache: BTreeMap<(String, usize), QuerySet> = BTreeMap::new();
        for spec in &cfg.attacks {
            for &budget in &cfg.budgets {
                let q = self.queries(spec, budget)?;
                let mal = self.score_all(&q.samples)?;
                for &ratio in &cfg.ratios {
                    let (mi, ci) = mix_indices(&RngHandle::new(cfg.seed, "mix").derive(&spec.label()).derive_indexed("budget", budget as u64), q.len(), p, ratio)?;
                    for d in &cfg.defenses {
                        let pos: Vec<f64> = mi.iter().map(|&i| mal[d][i]).collect();
                        let neg: Vec<f64> = ci.iter().map(|&i| clean[d][i]).collect();
                        let m = metric_row(&ScoredPopulation::new(pos, neg)?);
                        rows.push(ReportRow {
                            defense: d.as_str().into(),
                            attack: spec.label(),
                            budget,
                            ratio,
                            malicious: mi.len(),
                            clean: ci.len(),
                            auroc: percent(m.auroc),
                            aupr: percent(m.aupr),
                            fpr95: percent(m.fpr95),
                            fpr90: percent(m.fpr90),
                        });
                    }
                }
                query_cache.insert((spec.label(), budget), q);
            }
        }
        self.runtime.insert("attacks".into(), clock.elapsed().as_secs_f64());
        clock = Instant::now();

        let embedding_sweep = match &cfg.embedding_sweep {
            Some(s) => {
                let q = &query_cache[&(s.attack.clone(), cfg.max_budget())];
                self.embedding_sweep(s, &q.samples)?
            }
            None => Vec::new(),
        };
        self.runtime.insert("embedding_sweep".into(), clock.elapsed().as_secs_f64());

        let accuracy = evaluate_accuracy(&self.victim, &self.ws.data.evaluation)?;
        let hash_now = self.victim.content_hash();
        let mut echo = cfg.clone();
        echo.output_dir = PathBuf::new();
        let variants = [DefenseId::Same, DefenseId::SameX, DefenseId::SameY]
            .into_iter()
            .filter(|d| cfg.defenses.contains(d))
            .map(|d| {
                self.variant(d).map(|c| DetectorSummary {
                    defense: d.as_str().into(),
                    alpha: c.alpha,
                    c_rec: c.c_rec,
                    c_dev: c.c_dev,
                    threshold: c.threshold.unwrap_or(f64::NAN),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExperimentReport {
            schema_version: REPORT_SCHEMA_VERSION,
            name: cfg.name.clone(),
            seed: cfg.seed,
            config: echo,
            victim: VictimSummary {
                accuracy: percent(accuracy),
                content_hash: hash_now.clone(),
                unchanged: hash_now == self.victim_hash,
            },
            detectors: variants,
            rows,
            mae_dynamics: self.dynamics.clone(),
            embedding_sweep,
            runtime: RuntimeReport {
                stages: self.runtime.clone(),
            },
        })
    }

    /// Reconstruction-only AUROC of MAEs differing only in embedding size.
    fn embedding_sweep(&self, s: &EmbeddingSweep, queries: &[ImageTensor]) -> Result<Vec<SweepPoint>> {
        let clean = self.ws.data.evaluation.samples();
        let mut out = Vec::new();
        for &m in &s.sizes {
            let mut tc = self.ws.cfg.mae.train.clone();
            tc.arch.embed = m;
            if let Some(e) = s.epochs {
                tc.epochs = e;
                tc.warmup_epochs = tc.warmup_epochs.min(e);
            }
            let mae = if tc == self.ws.cfg.mae.train && self.ws.cfg.mae.checkpoint.is_none() {
                self.mae.clone()
            } else {
                train_mae_cached(&self.ws.dir, &format!("mae-embed{m}"), &tc, &[], &self.ws.data.train, None, self.ws.exec)?.0
            };
            let pos = mae.score_batch(self.ws.exec, queries)?;
            let neg = mae.score_batch(self.ws.exec, clean)?;
            out.push(SweepPoint {
                embed: m,
                auroc: percent(auroc(&ScoredPopulation::new(pos, neg)?)),
            });
        }
        Ok(out)
    }
}

/// Picks the malicious and clean members of a stream with malicious
/// fraction `ratio`, as large as the two pools allow.
pub fn mix_indices(rng: &RngHandle, malicious_pool: usize, clean_pool: usize, ratio: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("ratio {ratio} outside (0, 1)")));
    }
    let cap = (clean_pool as f64 * ratio / (1.0 - ratio)).floor() as usize;
    let n_mal = malicious_pool.min(cap);
    let n_clean = ((n_mal as f64 * (1.0 - ratio) / ratio).round() as usize).min(clean_pool);
    if n_mal == 0 || n_clean == 0 {
        return Err(Error::invalid(format!(
            "ratio {ratio} leaves an empty side with {malicious_pool} malicious and {clean_pool} clean samples"
        )));
    }
    let r = rng.derive(&format!("ratio-{ratio}"));
    let mut mi = index::sample(&mut r.derive("malicious").rng(), malicious_pool, n_mal).into_vec();
    let mut ci = index::sample(&mut r.derive("clean").rng(), clean_pool, n_clean).into_vec();
    mi.sort_unstable();
    ci.sort_unstable();
    Ok((mi, ci))
}

fn dynamics_point(mae: &MAEModel, epoch: usize, data: &Datasets, exec: Execution) -> Result<DynamicsPoint> {
    let n = data.probe.len().min(data.evaluation.len());
    let clean = mae.score_batch(exec, &data.evaluation.samples()[..n])?;
    let noise = mae.score_batch(exec, data.probe.samples())?;
    Ok(DynamicsPoint {
        epoch,
        clean_mean: mean(&clean),
        noise_mean: mean(&noise),
    })
}

fn train_mae_cached(
    dir: &Path,
    name: &str,
    cfg: &MAETrainConfig,
    snapshots: &[usize],
    train: &LabeledDataset,
    probes: Option<&Datasets>,
    exec: Execution,
) -> Result<(MAEModel, Vec<DynamicsPoint>, PathBuf)> {
    let probe_fp = probes.map(|d| (d.evaluation.fingerprint(), d.probe.fingerprint()));
    let st = Stage::new(dir, name, stage_key(json!(["mae", train.fingerprint(), cfg, snapshots, probe_fp])));
    let dyn_path = st.sidecar("dynamics.json");
    if st.cached() {
        return Ok((MAEModel::load(&st.stem)?, read_json(&dyn_path)?, st.stem));
    }
    tracing::info!(stage = name, epochs = cfg.epochs, embed = cfg.arch.embed, "training mae");
    let mut dynamics = Vec::new();
    let mae = train_mae_with(train, cfg, exec, |epoch, m| {
        if let Some(d) = probes {
            if snapshots.contains(&epoch) || epoch == cfg.epochs {
                let p = dynamics_point(m, epoch, d, exec)?;
                tracing::info!(epoch, clean = p.clean_mean, noise = p.noise_mean, "mae snapshot");
                dynamics.push(p);
            }
        }
        Ok(())
    })?;
    mae.save(&st.stem)?;
    mae.write_loss_curve(&st.sidecar("loss.csv"))?;
    write_json(&dyn_path, &dynamics)?;
    st.finish()?;
    Ok((mae, dynamics, st.stem))
}

/// Prepares, evaluates and returns the report.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<ExperimentReport> {
    let mut p = Pipeline::prepare(cfg)?;
    p.evaluate()
}
