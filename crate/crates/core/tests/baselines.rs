mod common;

use common::*;
use same_core::baselines::*;
use same_core::classifier::{train_classifier, Architecture};
use same_core::data::{CorpusKind, ImageTensor, Shape};

#[test]
fn negative_gamma_is_rejected() {
    let (d, o) = (digits(16, "d"), corpus(CorpusKind::Garments, 16, "o"));
    assert!(train_oe(Architecture::Mlp, &d, &o, -0.1, &quick_train()).is_err());
    assert!(train_edm(Architecture::Mlp, &d, &o, 2, -1.0, &quick_train()).is_err());
}

#[test]
fn zero_gamma_matches_plain_training() {
    let (d, o) = (digits(64, "d"), corpus(CorpusKind::Garments, 64, "o"));
    let oe = train_oe(Architecture::Mlp, &d, &o, 0.0, &quick_train()).unwrap();
    let plain = train_classifier(Architecture::Mlp, &d, &quick_train()).unwrap();
    assert_eq!(oe.model.params(), plain.params());
}

#[test]
fn ensembles_need_two_members() {
    let (d, o) = (digits(16, "d"), corpus(CorpusKind::Garments, 16, "o"));
    assert!(train_edm(Architecture::Mlp, &d, &o, 1, 1.0, &quick_train()).is_err());
}

#[test]
fn outliers_must_differ_from_training_data() {
    let d = digits(16, "d");
    assert!(train_oe(Architecture::Mlp, &d, &d, 0.5, &quick_train()).is_err());
}

#[test]
fn total_variation_examples() {
    assert_eq!(total_variation(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
    assert_eq!(total_variation(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    assert!((total_variation(&[0.6, 0.4], &[0.4, 0.6]) - 0.2).abs() < 1e-6);
}

#[test]
fn scores_are_in_range_and_outliers_score_higher() {
    let d = digits(300, "d");
    let o = corpus(CorpusKind::Garments, 300, "o");
    let cfg = same_core::classifier::TrainConfig {
        epochs: 4,
        ..quick_train()
    };
    let oe = train_oe(Architecture::Mlp, &d, &o, 0.5, &cfg).unwrap();
    let edm = train_edm(Architecture::Mlp, &d, &o, 2, 1.0, &cfg).unwrap();
    let clean = digits(50, "clean");
    let held = corpus(CorpusKind::Garments, 50, "held");
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let oe_clean = oe_score_batch(&oe, clean.samples()).unwrap();
    let oe_out = oe_score_batch(&oe, held.samples()).unwrap();
    assert!(oe_clean.iter().chain(&oe_out).all(|v| (0.0..=0.9 + 1e-6).contains(v)));
    assert!(mean(oe_out) > mean(oe_clean));
    let e_clean = edm_score_batch(&edm, clean.samples()).unwrap();
    let e_out = edm_score_batch(&edm, held.samples()).unwrap();
    assert!(e_clean.iter().chain(&e_out).all(|v| (0.0..=1.0).contains(v)));
    assert!(mean(e_out) > mean(e_clean));
    let x = &clean.samples()[0];
    assert_eq!(oe_score(&oe, x).unwrap(), oe_score_batch(&oe, std::slice::from_ref(x)).unwrap()[0]);
    assert!(oe_score(&oe, &ImageTensor::zeros(Shape::new(1, 7, 7))).is_err());
}

#[test]
fn checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (d, o) = (digits(32, "d"), corpus(CorpusKind::Garments, 32, "o"));
    let oe = train_oe(Architecture::Mlp, &d, &o, 0.5, &quick_train()).unwrap();
    oe.save(&dir.path().join("oe")).unwrap();
    let back = OEModel::load(&dir.path().join("oe")).unwrap();
    assert_eq!(back.model.params(), oe.model.params());
    let edm = train_edm(Architecture::Mlp, &d, &o, 2, 1.0, &quick_train()).unwrap();
    edm.save(&dir.path().join("edm")).unwrap();
    let back = EDMEnsemble::load(&dir.path().join("edm")).unwrap();
    let x = &d.samples()[0];
    assert_eq!(edm_score(&back, x).unwrap(), edm_score(&edm, x).unwrap());
}
