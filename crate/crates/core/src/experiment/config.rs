use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackKind};
use crate::classifier::{Architecture, LossKind, TrainConfig};
use crate::data::{CorpusKind, Shape};
use crate::error::{Error, Result};
use crate::mae::MAETrainConfig;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseId {
    Same,
    SameX,
    SameY,
    Oe,
    Edm,
}

impl DefenseId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseId::Same => "same",
            DefenseId::SameX => "same-x",
            DefenseId::SameY => "same-y",
            DefenseId::Oe => "oe",
            DefenseId::Edm => "edm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        train_count: usize,
        test_count: usize,
        #[serde(default = "default_shape")]
        shape: Shape,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_shape() -> Shape {
    Shape {
        channels: 1,
        height: 28,
        width: 28,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Held-out samples reserved for normalizers and the threshold.
    #[serde(default = "default_calibration")]
    pub calibration_count: usize,
    /// Held-out samples reserved as attacker seeds.
    #[serde(default = "default_attacker")]
    pub attacker_count: usize,
    #[serde(default = "default_outlier_corpus")]
    pub outlier_corpus: CorpusKind,
    #[serde(default = "default_outlier_count")]
    pub outlier_count: usize,
    /// Size of each knockoff proxy corpus; defaults to twice the largest budget.
    #[serde(default)]
    pub proxy_count: Option<usize>,
    /// Uniform-noise probe used for reconstruction dynamics.
    #[serde(default = "default_probe")]
    pub probe_count: usize,
}

fn default_calibration() -> usize {
    1000
}
fn default_attacker() -> usize {
    500
}
fn default_outlier_corpus() -> CorpusKind {
    CorpusKind::Garments
}
fn default_outlier_count() -> usize {
    5000
}
fn default_probe() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    #[serde(default = "default_arch")]
    pub arch: Architecture,
    #[serde(default = "default_victim_train")]
    pub train: TrainConfig,
    /// Pre-trained checkpoint stem; skips training when set.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

fn default_arch() -> Architecture {
    Architecture::Conv3
}

pub fn default_victim_train() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 64,
        learning_rate: 0.02,
        momentum: 0.9,
        seed: 1,
        loss: LossKind::CrossEntropy,
    }
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            arch: default_arch(),
            train: default_victim_train(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaeStageConfig {
    #[serde(default)]
    pub train: MAETrainConfig,
    /// Epochs at which to keep a snapshot for reconstruction dynamics.
    #[serde(default)]
    pub snapshot_epochs: Vec<usize>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl Default for MaeStageConfig {
    fn default() -> Self {
        Self {
            train: MAETrainConfig::default(),
            snapshot_epochs: vec![10],
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxStageConfig {
    #[serde(default = "default_aux_train")]
    pub train: TrainConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

pub fn default_aux_train() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 64,
        learning_rate: 0.5,
        momentum: 0.9,
        seed: 3,
        loss: LossKind::MseToSoftTargets,
    }
}

impl Default for AuxStageConfig {
    fn default() -> Self {
        Self {
            train: default_aux_train(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorStageConfig {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_fpr")]
    pub target_fpr: f64,
    /// Clean quantile used to scale both score terms; 0.5 is the median.
    #[serde(default = "default_norm_quantile")]
    pub norm_quantile: f64,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_fpr() -> f64 {
    0.05
}
fn default_norm_quantile() -> f64 {
    0.5
}

impl Default for DetectorStageConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            target_fpr: default_fpr(),
            norm_quantile: default_norm_quantile(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_oe_gamma")]
    pub oe_gamma: f64,
    #[serde(default = "default_edm_gamma")]
    pub edm_gamma: f64,
    #[serde(default = "default_edm_members")]
    pub edm_members: usize,
    #[serde(default = "default_victim_train")]
    pub train: TrainConfig,
}

fn default_oe_gamma() -> f64 {
    0.5
}
fn default_edm_gamma() -> f64 {
    1.0
}
fn default_edm_members() -> usize {
    3
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            oe_gamma: default_oe_gamma(),
            edm_gamma: default_edm_gamma(),
            edm_members: default_edm_members(),
            train: default_victim_train(),
        }
    }
}

/// An attack without its budget; budgets come from the experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub seed: u64,
    #[serde(flatten)]
    pub kind: AttackKind,
}

impl AttackSpec {
    pub fn with_budget(&self, budget: usize) -> AttackConfig {
        AttackConfig {
            budget,
            seed: self.seed,
            kind: self.kind.clone(),
        }
    }

    pub fn label(&self) -> String {
        self.with_budget(1).label()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSweep {
    pub sizes: Vec<usize>,
    /// Attack label whose queries are scored, e.g. `knockoff`.
    pub attack: String,
    /// MAE epochs for sweep models; defaults to the main MAE's.
    #[serde(default)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub seed: u64,
    /// Where checkpoints and reports go. Not echoed into reports.
    #[serde(default)]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub victim: VictimConfig,
    #[serde(default)]
    pub mae: MaeStageConfig,
    #[serde(default)]
    pub auxiliary: AuxStageConfig,
    #[serde(default)]
    pub detector: DetectorStageConfig,
    #[serde(default)]
    pub baselines: BaselineConfig,
    pub attacks: Vec<AttackSpec>,
    pub defenses: Vec<DefenseId>,
    pub budgets: Vec<usize>,
    pub ratios: Vec<f64>,
    #[serde(default)]
    pub embedding_sweep: Option<EmbeddingSweep>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "config schema version {} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn rebase(&mut self, base: &Path) {
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut self.output_dir);
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } = &mut self.data.source
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                rebase(p);
            }
        }
        for p in [&mut self.victim.checkpoint, &mut self.mae.checkpoint, &mut self.auxiliary.checkpoint]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn max_budget(&self) -> usize {
        self.budgets.iter().copied().max().unwrap_or(0)
    }

    /// Checks everything that can be checked without training: value
    /// ranges, the attack grid, and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Format(format!("config schema version {} is not supported", self.schema_version)));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return Err(Error::invalid("ratios must be non-empty and inside (0, 1)"));
        }
        if self.budgets.is_empty() || self.budgets.contains(&0) {
            return Err(Error::invalid("budgets must be non-empty and positive"));
        }
        if self.attacks.is_empty() || self.defenses.is_empty() {
            return Err(Error::invalid("at least one attack and one defense are required"));
        }
        let labels: BTreeSet<String> = self.attacks.iter().map(AttackSpec::label).collect();
        if labels.len() != self.attacks.len() {
            return Err(Error::invalid("attack labels must be unique"));
        }
        let defenses: BTreeSet<_> = self.defenses.iter().collect();
        if defenses.len() != self.defenses.len() {
            return Err(Error::invalid("defense ids must be unique"));
        }
        self.victim.train.validate()?;
        self.auxiliary.train.validate()?;
        self.mae.train.validate()?;
        if self.defenses.iter().any(|d| matches!(d, DefenseId::Oe | DefenseId::Edm)) {
            self.baselines.train.validate()?;
            if !(self.baselines.oe_gamma >= 0.0 && self.baselines.edm_gamma >= 0.0) {
                return Err(Error::invalid("baseline gamma must be non-negative"));
            }
            if self.baselines.edm_members < 2 {
                return Err(Error::invalid("edm needs at least two members"));
            }
        }
        if !(0.0..=1.0).contains(&self.detector.alpha) || !(self.detector.target_fpr > 0.0 && self.detector.target_fpr < 1.0) {
            return Err(Error::invalid("detector alpha or target fpr out of range"));
        }
        if !(self.detector.norm_quantile > 0.0 && self.detector.norm_quantile < 1.0) {
            return Err(Error::invalid("detector normalizer quantile outside (0, 1)"));
        }
        if let Some(e) = self.mae.snapshot_epochs.iter().find(|e| **e == 0 || **e > self.mae.train.epochs) {
            return Err(Error::invalid(format!("snapshot epoch {e} outside 1..={}", self.mae.train.epochs)));
        }
        for b in &self.budgets {
            for a in &self.attacks {
                a.with_budget(*b).validate()?;
                if let AttackKind::Jbda { seed_count, .. } = &a.kind {
                    if b < seed_count {
                        return Err(Error::invalid(format!("budget {b} is smaller than the {seed_count} jbda seeds")));
                    }
                    if *seed_count > self.data.attacker_count {
                        return Err(Error::invalid(format!(
                            "jbda needs {seed_count} seeds but only {} attacker samples are reserved",
                            self.data.attacker_count
                        )));
                    }
                }
                if let AttackKind::Knockoff { proxy, .. } = &a.kind {
                    proxy.parse::<CorpusKind>()?;
                    if self.data.proxy_count.is_some_and(|n| n < *b) {
                        return Err(Error::invalid(format!("proxy corpus is smaller than budget {b}")));
                    }
                }
            }
        }
        if let Some(s) = &self.embedding_sweep {
            if !labels.contains(&s.attack) {
                return Err(Error::invalid(format!("embedding sweep attack `{}` is not in the attack list", s.attack)));
            }
            if s.sizes.is_empty() || s.sizes.iter().any(|m| *m == 0 || m % 4 != 0 || m % self.mae.train.arch.heads != 0) {
                return Err(Error::invalid("embedding sizes must be positive multiples of 4 and of the head count"));
            }
        }
        let mut files: Vec<&Path> = Vec::new();
        if let DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } = &self.data.source
        {
            files.extend([train_images.as_path(), train_labels, test_images, test_labels]);
        }
        for c in [&self.victim.checkpoint, &self.mae.checkpoint, &self.auxiliary.checkpoint].into_iter().flatten() {
            let j = c.with_extension("json");
            let b = c.with_extension("bin");
            if !j.exists() || !b.exists() {
                return Err(Error::invalid(format!("checkpoint {} cannot be resolved", c.display())));
            }
        }
        for f in files {
            if !f.exists() {
                return Err(Error::invalid(format!("dataset file {} does not exist", f.display())));
            }
        }
        if self.auxiliary.checkpoint.is_some() && (self.victim.checkpoint.is_none() || self.mae.checkpoint.is_none()) {
            return Err(Error::invalid("an auxiliary checkpoint requires victim and mae checkpoints"));
        }
        Ok(())
    }
}
