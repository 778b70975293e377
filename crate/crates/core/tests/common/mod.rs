#![allow(dead_code)]

use same_core::classifier::{LossKind, TrainConfig};
use same_core::data::{make_synthetic_corpus, CorpusKind, LabeledDataset, Shape};
use same_core::mae::{MAETrainConfig, MaeArch};
use same_core::rng::RngHandle;

pub const SHAPE: Shape = Shape::new(1, 28, 28);

pub fn corpus(kind: CorpusKind, n: usize, stream: &str) -> LabeledDataset {
    make_synthetic_corpus(&kind, n, SHAPE, &RngHandle::new(5, stream)).unwrap()
}

pub fn digits(n: usize, stream: &str) -> LabeledDataset {
    corpus(CorpusKind::Digits, n, stream)
}

pub fn quick_train() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 32,
        learning_rate: 0.05,
        ..TrainConfig::default()
    }
}

pub fn soft_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        loss: LossKind::MseToSoftTargets,
        ..quick_train()
    }
}

pub fn tiny_arch() -> MaeArch {
    MaeArch {
        embed: 16,
        depth: 1,
        heads: 2,
        decoder_embed: 16,
        decoder_depth: 1,
        decoder_heads: 2,
        ..MaeArch::default()
    }
}

pub fn tiny_mae(epochs: usize) -> MAETrainConfig {
    MAETrainConfig {
        epochs,
        warmup_epochs: 1.min(epochs),
        batch_size: 32,
        arch: tiny_arch(),
        ..MAETrainConfig::default()
    }
}
