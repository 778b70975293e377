mod common;

use common::*;
use proptest::prelude::*;
use same_core::auxiliary::AuxiliaryModel;
use same_core::classifier::{Architecture, ClassifierModel};
use same_core::detector::*;
use same_core::mae::MAEModel;
use same_core::metrics::{auroc, ScoredPopulation};
use same_core::rng::RngHandle;

fn record(score: f64) -> AnomalyRecord {
    AnomalyRecord {
        recon_error: 0.0,
        deviation_error: 0.0,
        score,
        verdict: None,
        received_at_ms: None,
        scored_at_ms: None,
        query_fingerprint: String::new(),
    }
}

fn cfg(alpha: f64, c_rec: f64, c_dev: f64) -> DetectorConfig {
    DetectorConfig {
        alpha,
        c_rec,
        c_dev,
        ..DetectorConfig::default()
    }
}

#[test]
fn combine_examples() {
    let c = Components {
        recon_error: 0.2,
        deviation_error: 0.4,
    };
    assert!((cfg(0.5, 1.0, 1.0).combine(c) - 0.3).abs() < 1e-12);
    assert_eq!(cfg(1.0, 0.1, 7.0).combine(c), 0.2 / 0.1);
    assert_eq!(cfg(0.0, 0.1, 0.5).combine(c), 0.4 / 0.5);
}

#[test]
fn threshold_examples() {
    let s: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
    let t = calibrate_threshold(&s, 0.05).unwrap();
    assert_eq!(t, 0.95);
    assert_eq!(s.iter().filter(|v| **v > t).count(), 5);
    let ten: Vec<f64> = (0..10).map(f64::from).collect();
    let t = calibrate_threshold(&ten, 0.1).unwrap();
    assert_eq!(ten.iter().filter(|v| **v > t).count(), 1);
    assert_eq!(calibrate_threshold(&[0.3; 7], 0.05).unwrap(), 0.3);
    assert!(calibrate_threshold(&[], 0.05).is_err());
    assert!(calibrate_threshold(&[1.0], 1.0).is_err());
}

#[test]
fn tie_at_threshold_is_benign() {
    assert_eq!(classify_query(&record(0.5), 0.5), Verdict::Benign);
    assert_eq!(classify_query(&record(0.5 + 1e-9), 0.5), Verdict::Malicious);
    assert_eq!(classify_query(&record(0.0), 0.0), Verdict::Benign);
}

#[test]
fn normalizer_examples() {
    let (r, d) = fit_normalizers(&[0.01, 0.02, 0.03], &[0.0, 0.0]).unwrap();
    assert_eq!(r, 0.02);
    assert_eq!(d, NORMALIZER_FLOOR);
    assert!(fit_normalizers(&[], &[1.0]).is_err());
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    let (r, _) = fit_normalizers_at(&v, &v, 0.95).unwrap();
    assert_eq!(r, 95.0);
    assert!(fit_normalizers_at(&v, &v, 1.0).is_err());
}

#[test]
fn config_validation() {
    assert!(cfg(1.5, 1.0, 1.0).validate().is_err());
    assert!(cfg(0.5, 0.0, 1.0).validate().is_err());
    let bad_fpr = DetectorConfig {
        target_fpr: 0.0,
        ..DetectorConfig::default()
    };
    assert!(bad_fpr.validate().is_err());
    let bad_q = DetectorConfig {
        norm_quantile: 1.0,
        ..DetectorConfig::default()
    };
    assert!(bad_q.validate().is_err());
}

#[test]
fn old_configs_default_to_the_median() {
    let json = r#"{"alpha":0.5,"threshold":null,"target_fpr":0.05,"c_rec":1.0,"c_dev":1.0}"#;
    let c: DetectorConfig = serde_json::from_str(json).unwrap();
    assert_eq!(c.norm_quantile, 0.5);
}

fn models(victim_seed: u64) -> (ClassifierModel, MAEModel) {
    (
        ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(victim_seed, "v")).unwrap(),
        MAEModel::init(tiny_arch(), SHAPE, 0.75, &RngHandle::new(0, "m")).unwrap(),
    )
}

fn aux_for(victim: &ClassifierModel, mae: &MAEModel) -> AuxiliaryModel {
    AuxiliaryModel {
        model: ClassifierModel::init(Architecture::Mlp, SHAPE, 10, &RngHandle::new(3, "a")).unwrap(),
        provenance: same_core::auxiliary::AuxProvenance {
            mae_hash: mae.content_hash(),
            victim_hash: victim.content_hash(),
            seed: 3,
        },
    }
}

#[test]
fn assembly_checks_provenance() {
    let (v, m) = models(0);
    let aux = aux_for(&v, &m);
    assert!(Detector::assemble(v.clone(), m.clone(), aux.clone(), DetectorConfig::default()).is_ok());
    let (other, _) = models(1);
    assert!(matches!(
        Detector::assemble(other, m, aux, DetectorConfig::default()),
        Err(same_core::Error::Provenance(_))
    ));
}

#[test]
fn calibration_meets_target_and_scoring_is_pure() {
    let (v, m) = models(0);
    let aux = aux_for(&v, &m);
    let mut d = Detector::assemble(v, m, aux, DetectorConfig::default()).unwrap();
    let clean = digits(60, "cal");
    d.calibrate(clean.samples()).unwrap();
    let t = d.cfg.threshold.unwrap();
    let flagged = clean
        .samples()
        .iter()
        .filter(|x| anomaly_score(x, &d).unwrap().verdict == Some(Verdict::Malicious))
        .count();
    assert!(flagged as f64 / 60.0 <= d.cfg.target_fpr + 1.0 / 60.0);
    let x = &clean.samples()[0];
    let a = anomaly_score(x, &d).unwrap();
    assert_eq!(a, anomaly_score(x, &d).unwrap());
    assert!(a.score >= 0.0);
    assert_eq!(a.verdict, Some(classify_query(&a, t)));
}

#[test]
fn bundle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (v, m) = models(0);
    let aux = aux_for(&v, &m);
    let mut d = Detector::assemble(v, m, aux, DetectorConfig::default()).unwrap();
    d.calibrate(digits(20, "cal").samples()).unwrap();
    let path = dir.path().join("bundle.json");
    write_bundle(&d, "fp", &path).unwrap();
    let back = DetectorBundle::load(&path).unwrap().open(&path).unwrap();
    assert_eq!(back.cfg, d.cfg);
    let q = digits(1, "q");
    let x = &q.samples()[0];
    assert_eq!(anomaly_score(x, &back).unwrap(), anomaly_score(x, &d).unwrap());
}

fn comps() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..40)
}

proptest! {
    #[test]
    fn auroc_is_invariant_to_common_normalizer_scale(pos in comps(), neg in comps(), k in 0.01f64..100.0, alpha in 0.0f64..=1.0) {
        let score = |c: &DetectorConfig, v: &[(f64, f64)]| -> Vec<f64> {
            v.iter().map(|(r, d)| c.combine(Components { recon_error: *r, deviation_error: *d })).collect()
        };
        let a = cfg(alpha, 0.3, 0.7);
        let b = cfg(alpha, 0.3 * k, 0.7 * k);
        let pa = ScoredPopulation::new(score(&a, &pos), score(&a, &neg)).unwrap();
        let pb = ScoredPopulation::new(score(&b, &pos), score(&b, &neg)).unwrap();
        prop_assert!((auroc(&pa) - auroc(&pb)).abs() < 1e-9);
    }

    #[test]
    fn endpoints_rank_like_single_terms(v in comps()) {
        for (alpha, pick) in [(1.0, 0usize), (0.0, 1)] {
            let c = cfg(alpha, 0.3, 0.7);
            let s: Vec<f64> = v.iter().map(|(r, d)| c.combine(Components { recon_error: *r, deviation_error: *d })).collect();
            let t: Vec<f64> = v.iter().map(|p| if pick == 0 { p.0 } else { p.1 }).collect();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    prop_assert_eq!(s[i].partial_cmp(&s[j]), t[i].partial_cmp(&t[j]));
                }
            }
        }
    }

    #[test]
    fn calibrated_fpr_is_bounded(scores in prop::collection::vec(0.0f64..10.0, 1..200), fpr in 0.01f64..0.99) {
        let t = calibrate_threshold(&scores, fpr).unwrap();
        let above = scores.iter().filter(|v| **v > t).count() as f64 / scores.len() as f64;
        prop_assert!(above <= fpr + 1.0 / scores.len() as f64);
    }
}
