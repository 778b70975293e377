//! Sequential versus rayon execution of the hot paths. With the `parallel`
//! feature disabled both variants run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use same_core::auxiliary::{AuxProvenance, AuxiliaryModel};
use same_core::classifier::{Architecture, ClassifierModel};
use same_core::data::{make_synthetic_corpus, CorpusKind, LabeledDataset, Shape};
use same_core::detector::{Detector, DetectorConfig};
use same_core::mae::{MAEModel, MaeArch};
use same_core::nn::loss::cross_entropy;
use same_core::par::Execution;
use same_core::rng::RngHandle;

const SHAPE: Shape = Shape::new(1, 28, 28);
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn data(n: usize) -> LabeledDataset {
    make_synthetic_corpus(&CorpusKind::Digits, n, SHAPE, &RngHandle::new(0, "bench")).unwrap()
}

fn detector() -> Detector {
    let victim = ClassifierModel::init(Architecture::Conv3, SHAPE, 10, &RngHandle::new(1, "v")).unwrap();
    let mae = MAEModel::init(MaeArch::default(), SHAPE, 0.75, &RngHandle::new(2, "m")).unwrap();
    let aux = AuxiliaryModel {
        model: ClassifierModel::init(Architecture::Conv3, SHAPE, 10, &RngHandle::new(3, "a")).unwrap(),
        provenance: AuxProvenance {
            mae_hash: mae.content_hash(),
            victim_hash: victim.content_hash(),
            seed: 3,
        },
    };
    Detector::assemble(victim, mae, aux, DetectorConfig::default()).unwrap()
}

fn scoring(c: &mut Criterion) {
    let d = detector();
    let xs = data(128);
    let mut g = c.benchmark_group("score_128");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, e| {
            b.iter(|| d.components_batch(*e, xs.samples()).unwrap())
        });
    }
    g.finish();
}

fn classifier_gradient(c: &mut Criterion) {
    let m = ClassifierModel::init(Architecture::Conv3, SHAPE, 10, &RngHandle::new(1, "v")).unwrap();
    let xs = data(64);
    let x = xs.flat_pixels(0..64);
    let labels = xs.labels().to_vec();
    let mut g = c.benchmark_group("conv3_gradient_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, e| {
            b.iter(|| m.batch_gradient(*e, &x, 64, |r, logits| cross_entropy(&labels[r], logits, 10, 64.0)))
        });
    }
    g.finish();
}

fn reconstruction(c: &mut Criterion) {
    let mae = MAEModel::init(MaeArch::default(), SHAPE, 0.75, &RngHandle::new(2, "m")).unwrap();
    let xs = data(128);
    let masks: Vec<_> = xs.samples().iter().map(|x| mae.scoring_mask(x)).collect();
    let mut g = c.benchmark_group("mae_reconstruct_128");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, e| {
            b.iter(|| mae.reconstruct_batch(*e, xs.samples(), &masks).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, scoring, classifier_gradient, reconstruction);
criterion_main!(benches);
