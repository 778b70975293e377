use std::sync::OnceLock;

use same_core::auxiliary::{build_reconstructed_dataset, train_auxiliary};
use same_core::classifier::{train_classifier, Architecture, LossKind, TrainConfig};
use same_core::data::{make_synthetic_corpus, CorpusKind, LabeledDataset, Shape};
use same_core::detector::{Detector, DetectorConfig};
use same_core::mae::{train_mae, MAETrainConfig, MaeArch};
use same_core::rng::RngHandle;

pub const SHAPE: Shape = Shape::new(1, 28, 28);

pub fn digits(n: usize, stream: &str) -> LabeledDataset {
    make_synthetic_corpus(&CorpusKind::Digits, n, SHAPE, &RngHandle::new(5, stream)).unwrap()
}

pub fn noise(n: usize) -> LabeledDataset {
    make_synthetic_corpus(&CorpusKind::Noise, n, SHAPE, &RngHandle::new(5, "noise")).unwrap()
}

/// Small but functional detector calibrated at 5% FPR on clean digits,
/// trained once per test binary. The toy victim's deviation signal is weak,
/// so the score leans on reconstruction.
pub fn detector() -> Detector {
    static CACHE: OnceLock<Detector> = OnceLock::new();
    CACHE.get_or_init(build).clone()
}

fn build() -> Detector {
    let train = digits(600, "train");
    let victim = train_classifier(
        Architecture::Mlp,
        &train,
        &TrainConfig {
            epochs: 8,
            learning_rate: 0.05,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let mae_cfg = MAETrainConfig {
        epochs: 6,
        warmup_epochs: 1,
        batch_size: 32,
        arch: MaeArch {
            embed: 16,
            depth: 1,
            heads: 2,
            decoder_embed: 16,
            decoder_depth: 1,
            decoder_heads: 2,
            ..MaeArch::default()
        },
        ..MAETrainConfig::default()
    };
    let mae = train_mae(&train, &mae_cfg).unwrap();
    let recon = build_reconstructed_dataset(&mae, &train, &RngHandle::new(0, "recon")).unwrap();
    let aux_cfg = TrainConfig {
        epochs: 4,
        learning_rate: 0.5,
        loss: LossKind::MseToSoftTargets,
        ..TrainConfig::default()
    };
    let aux = train_auxiliary(&victim, &train, &recon, &mae, &aux_cfg).unwrap();
    let mut d = Detector::assemble(victim, mae, aux, DetectorConfig {
        alpha: 0.8,
        norm_quantile: 0.95,
        ..DetectorConfig::default()
    }).unwrap();
    d.calibrate(digits(200, "calibration").samples()).unwrap();
    d
}
