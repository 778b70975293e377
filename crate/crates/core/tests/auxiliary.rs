mod common;

use common::*;
use same_core::auxiliary::{auxiliary_loss, build_reconstructed_dataset, deviation_error, fit_auxiliary, train_auxiliary};
use same_core::classifier::{train_classifier, Architecture, ClassifierModel};
use same_core::mae::{train_mae, MAEModel};
use same_core::nn::loss::soft_target_mse;
use same_core::rng::RngHandle;

#[test]
fn deviation_examples() {
    assert_eq!(deviation_error(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    assert_eq!(deviation_error(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
    assert!((deviation_error(&[0.6, 0.4], &[0.4, 0.6]).unwrap() - 0.04).abs() < 1e-7);
    assert!(deviation_error(&[1.0], &[0.5, 0.5]).is_err());
}

#[test]
fn identity_stub_reproduces_the_dataset() {
    let data = digits(20, "stub");
    let mae = MAEModel::init(tiny_arch(), SHAPE, 0.0, &RngHandle::new(0, "mae")).unwrap();
    let recon = build_reconstructed_dataset(&mae, &data, &RngHandle::new(1, "r")).unwrap();
    assert_eq!(recon.samples(), data.samples());
    assert_eq!(recon.labels(), data.labels());
    assert!(build_reconstructed_dataset(&mae, &data.take("none", 0), &RngHandle::new(1, "r")).is_err());
}

#[test]
fn reconstruction_is_deterministic() {
    let data = digits(20, "det");
    let mae = MAEModel::init(tiny_arch(), SHAPE, 0.75, &RngHandle::new(0, "mae")).unwrap();
    let a = build_reconstructed_dataset(&mae, &data, &RngHandle::new(1, "r")).unwrap();
    let b = build_reconstructed_dataset(&mae, &data, &RngHandle::new(1, "r")).unwrap();
    assert_eq!(a.samples(), b.samples());
}

#[test]
fn victim_copy_on_identity_stub_is_a_fixed_point() {
    let data = digits(64, "fixed");
    let victim = train_classifier(Architecture::Mlp, &data, &quick_train()).unwrap();
    let mae = MAEModel::init(tiny_arch(), SHAPE, 0.0, &RngHandle::new(0, "mae")).unwrap();
    let recon = build_reconstructed_dataset(&mae, &data, &RngHandle::new(1, "r")).unwrap();
    assert!(auxiliary_loss(&victim, &victim, &data, &recon).unwrap() < 1e-6);
    let aux = fit_auxiliary(victim.clone(), &victim, &data, &recon, &mae.content_hash(), &soft_train()).unwrap();
    assert!(auxiliary_loss(&victim, &aux.model, &data, &recon).unwrap() < 1e-6);
}

#[test]
fn training_reduces_held_out_loss_and_leaves_victim_untouched() {
    let train = digits(300, "train");
    let held = digits(100, "held");
    let victim = train_classifier(Architecture::Mlp, &train, &quick_train()).unwrap();
    let before = victim.content_hash();
    let mae = train_mae(&train, &tiny_mae(2)).unwrap();
    let recon = build_reconstructed_dataset(&mae, &train, &RngHandle::new(1, "r")).unwrap();
    let aux = train_auxiliary(&victim, &train, &recon, &mae, &soft_train()).unwrap();
    assert_eq!(victim.content_hash(), before);
    assert_eq!(aux.provenance.victim_hash, before);
    assert_eq!(aux.provenance.mae_hash, mae.content_hash());

    let held_recon = build_reconstructed_dataset(&mae, &held, &RngHandle::new(2, "r")).unwrap();
    let untrained = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(soft_train().seed, "auxiliary/init")).unwrap();
    let trained_loss = auxiliary_loss(&victim, &aux.model, &held, &held_recon).unwrap();
    assert!(trained_loss < auxiliary_loss(&victim, &untrained, &held, &held_recon).unwrap());
}

#[test]
fn class_count_mismatch_is_rejected() {
    let data = digits(16, "k");
    let victim = ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(0, "v")).unwrap();
    let other = ClassifierModel::init(Architecture::Mlp, SHAPE, 4, &RngHandle::new(0, "a")).unwrap();
    assert!(fit_auxiliary(other, &victim, &data, &data, "x", &soft_train()).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    use rand::Rng;
    let mut r = RngHandle::new(4, "fd").rng();
    let k = 5;
    let rows = 3;
    let logits: Vec<f64> = (0..k * rows).map(|_| r.gen_range(-2.0..2.0)).collect();
    let mut targets: Vec<f64> = (0..k * rows).map(|_| r.gen()).collect();
    for row in targets.chunks_mut(k) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    let (_, g) = soft_target_mse(&targets, &logits, k, rows as f64);
    let h = 1e-6;
    for i in 0..logits.len() {
        let (mut up, mut dn) = (logits.clone(), logits.clone());
        up[i] += h;
        dn[i] -= h;
        let fd = (soft_target_mse(&targets, &up, k, rows as f64).0 - soft_target_mse(&targets, &dn, k, rows as f64).0) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
        assert!(rel <= 1e-4 || (fd - g[i]).abs() < 1e-10, "logit {i}: analytic {} numeric {fd}", g[i]);
    }
}
