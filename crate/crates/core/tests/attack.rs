mod common;

use common::*;
use same_core::attack::*;
use same_core::classifier::{train_classifier, Architecture, ClassifierModel};
use same_core::data::{CorpusKind, ImageTensor};
use same_core::rng::RngHandle;

fn jbda(budget: usize, step: f64, seeds: usize) -> AttackConfig {
    AttackConfig {
        budget,
        seed: 1,
        kind: AttackKind::Jbda {
            seed_count: seeds,
            step,
            rounds: None,
            substitute: same_core::classifier::TrainConfig {
                epochs: 1,
                ..default_substitute_cfg()
            },
        },
    }
}

fn dfme(budget: usize, mode: DfmeMode, generator: GeneratorConfig) -> AttackConfig {
    AttackConfig {
        budget,
        seed: 2,
        kind: AttackKind::Dfme { mode, generator },
    }
}

fn victim() -> ClassifierModel {
    train_classifier(Architecture::Mlp, &digits(200, "victim"), &quick_train()).unwrap()
}

#[test]
fn knockoff_selects_distinct_proxy_samples() {
    let proxy = corpus(CorpusKind::Letters, 120, "proxy");
    for strategy in [SelectionStrategy::Random, SelectionStrategy::Balanced] {
        let cfg = AttackConfig {
            budget: 50,
            seed: 4,
            kind: AttackKind::Knockoff {
                proxy: "letters".into(),
                strategy,
            },
        };
        let q = knockoff_select(&proxy, &cfg).unwrap();
        assert_eq!(q.len(), 50);
        let mut digests: Vec<_> = q.samples.iter().map(|x| x.digest()).collect();
        digests.sort();
        digests.dedup();
        assert_eq!(digests.len(), 50);
        assert!(q.samples.iter().all(|x| proxy.samples().contains(x)));
        assert_eq!(q, knockoff_select(&proxy, &cfg).unwrap());
    }
    let too_big = AttackConfig {
        budget: 121,
        seed: 4,
        kind: AttackKind::Knockoff {
            proxy: "letters".into(),
            strategy: SelectionStrategy::Random,
        },
    };
    assert!(knockoff_select(&proxy, &too_big).is_err());
}

#[test]
fn jbda_doubles_then_truncates() {
    let v = victim();
    let oracle = |xs: &[ImageTensor]| v.predict_batch(xs);
    let seeds = digits(20, "seeds");
    let mut sub = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(0, "s")).unwrap();
    let q = jbda_augment(&seeds, &mut sub, &oracle, &jbda(100, 0.1, 20)).unwrap();
    assert_eq!(q.len(), 100);
    assert_eq!(&q.samples[..20], seeds.samples());
    let origin = q.origin.as_ref().unwrap();
    assert_eq!(origin.len(), 100);
    // rounds grow 20 -> 40 -> 80 -> 100; every sample traces back to seed i % 20
    for (i, o) in origin.iter().enumerate() {
        assert_eq!(*o, i % 20, "sample {i}");
    }
    assert_eq!(q.responses.as_ref().unwrap().len(), 100);
}

#[test]
fn jbda_stays_in_the_step_ball() {
    let v = victim();
    let oracle = |xs: &[ImageTensor]| v.predict_batch(xs);
    let seeds = digits(10, "ball");
    let mut sub = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(0, "s")).unwrap();
    let q = jbda_augment(&seeds, &mut sub, &oracle, &jbda(80, 0.1, 10)).unwrap();
    let origin = q.origin.unwrap();
    let rounds = 3.0;
    for (i, x) in q.samples.iter().enumerate() {
        let mut root = i;
        while origin[root] != root {
            root = origin[root];
        }
        for (a, b) in x.pixels().iter().zip(seeds.samples()[root].pixels()) {
            assert!((0.0..=1.0).contains(a));
            assert!((a - b).abs() <= 0.1 * rounds + 1e-6);
        }
    }
}

#[test]
fn zero_step_leaves_seeds_unchanged() {
    let seeds = digits(8, "zero");
    let sub = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(0, "s")).unwrap();
    assert_eq!(jbda_step(&sub, seeds.samples(), 0.0).unwrap(), seeds.samples());
}

#[test]
fn jbda_budget_below_seed_count_fails() {
    let v = victim();
    let oracle = |xs: &[ImageTensor]| v.predict_batch(xs);
    let seeds = digits(20, "few");
    let mut sub = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(0, "s")).unwrap();
    assert!(jbda_augment(&seeds, &mut sub, &oracle, &jbda(10, 0.1, 20)).is_err());
    assert!(jbda(10, 1.5, 20).validate().is_err());
}

#[test]
fn oracle_failures_report_the_query_index() {
    let seeds = digits(10, "fail");
    let calls = std::cell::Cell::new(0);
    let oracle = |xs: &[ImageTensor]| {
        calls.set(calls.get() + 1);
        if calls.get() == 2 {
            Err(same_core::Error::InvalidArgument("down".into()))
        } else {
            Ok(vec![vec![0.1; 10]; xs.len()])
        }
    };
    let mut sub = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(0, "s")).unwrap();
    match jbda_augment(&seeds, &mut sub, &oracle, &jbda(40, 0.1, 10)) {
        Err(same_core::Error::Oracle { index, .. }) => assert_eq!(index, 10),
        other => panic!("expected an oracle error, got {other:?}"),
    }
}

#[test]
fn dfme_noise_is_uniform_and_budgeted() {
    let v = victim();
    let oracle = |xs: &[ImageTensor]| v.predict_batch(xs);
    let q = dfme_synthesize(&oracle, SHAPE, 10, &dfme(64, DfmeMode::Noise, GeneratorConfig::default())).unwrap();
    assert_eq!(q.len(), 64);
    let px: Vec<f32> = q.samples.iter().flat_map(|x| x.pixels().iter().copied()).collect();
    let mean = px.iter().sum::<f32>() / px.len() as f32;
    assert!((mean - 0.5).abs() < 0.01);
    assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn dfme_substitute_closes_the_gap() {
    let v = victim();
    let oracle = |xs: &[ImageTensor]| v.predict_batch(xs);
    let g = GeneratorConfig::default();
    let cfg = dfme(g.iterations * g.batch * (1 + g.directions), DfmeMode::Generator, g);
    let (q, trace) = dfme_synthesize_traced(&oracle, SHAPE, 10, &cfg).unwrap();
    assert_eq!(q.len(), cfg.budget);
    let d = trace.unwrap().disagreement;
    assert_eq!(d.len(), cfg_iterations(&cfg) + 1);
    assert!(d.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(d.last().unwrap() < &d[0], "{d:?}");
}

fn cfg_iterations(cfg: &AttackConfig) -> usize {
    match &cfg.kind {
        AttackKind::Dfme { generator, .. } => generator.iterations,
        _ => unreachable!(),
    }
}

#[test]
fn substitute_learns_from_answers() {
    let v = victim();
    let proxy = digits(200, "proxy");
    let cfg = AttackConfig {
        budget: 200,
        seed: 0,
        kind: AttackKind::Knockoff {
            proxy: "digits".into(),
            strategy: SelectionStrategy::Random,
        },
    };
    let q = knockoff_select(&proxy, &cfg).unwrap();
    let answers = v.predict_batch(&q.samples).unwrap();
    let sub = train_substitute(&q, &answers, Architecture::Mlp, &soft_train()).unwrap();
    let test = digits(100, "test");
    let fresh = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(9, "f")).unwrap();
    assert!(agreement(&sub, &v, &test).unwrap() > agreement(&fresh, &v, &test).unwrap());
    assert!(train_substitute(&q, &answers[..5], Architecture::Mlp, &soft_train()).is_err());
}
