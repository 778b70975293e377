use proptest::prelude::*;
use same_core::detector::{AnomalyRecord, Verdict};
use same_gateway::{apply_policy, difficulty, Decision, DefensePolicy, PolicyKind, PowParams};

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

fn pow(base: u32, max: u32, slope: f64) -> DefensePolicy {
    DefensePolicy {
        kind: PolicyKind::Pow,
        pow: PowParams {
            base_bits: base,
            max_bits: max,
            slope,
        },
    }
}

#[test]
fn monitor_always_predicts() {
    let p = DefensePolicy::new(PolicyKind::Monitor);
    assert_eq!(apply_policy(&record(100.0), 1.0, &p).unwrap(), Decision::Predict);
}

#[test]
fn reject_follows_the_strict_threshold() {
    let p = DefensePolicy::new(PolicyKind::Reject);
    assert_eq!(apply_policy(&record(0.5), 1.0, &p).unwrap(), Decision::Predict);
    assert_eq!(apply_policy(&record(1.0), 1.0, &p).unwrap(), Decision::Predict);
    assert_eq!(apply_policy(&record(1.0 + 1e-9), 1.0, &p).unwrap(), Decision::Reject);
}

#[test]
fn reject_uses_tau_not_a_stale_verdict() {
    let mut r = record(0.5);
    r.verdict = Some(Verdict::Malicious);
    let p = DefensePolicy::new(PolicyKind::Reject);
    assert_eq!(apply_policy(&r, 1.0, &p).unwrap(), Decision::Predict);
}

#[test]
fn pow_below_threshold_gets_base_bits() {
    let p = pow(6, 20, 3.0);
    assert_eq!(apply_policy(&record(0.2), 1.0, &p).unwrap(), Decision::Challenge { bits: 6 });
}

#[test]
fn difficulty_examples() {
    let p = pow(4, 20, 4.0).pow;
    assert_eq!(difficulty(1.0, 1.0, &p), 4);
    assert_eq!(difficulty(1.25, 1.0, &p), 5);
    assert_eq!(difficulty(2.0, 1.0, &p), 8);
    assert_eq!(difficulty(1e9, 1.0, &p), 20);
    assert_eq!(difficulty(f64::INFINITY, 1.0, &p), 20);
    assert_eq!(difficulty(1e9, 1.0, &pow(5, 20, 0.0).pow), 5);
}

#[test]
fn invalid_bounds_are_rejected() {
    assert!(pow(10, 8, 1.0).validate().is_err());
    assert!(pow(0, 25, 1.0).validate().is_err());
    assert!(pow(0, 24, -1.0).validate().is_err());
    assert!(pow(0, 24, 1.0).validate().is_ok());
    assert!(apply_policy(&record(0.0), 0.0, &pow(3, 2, 1.0)).is_err());
    assert!("bogus".parse::<PolicyKind>().is_err());
}

#[test]
fn difficulty_is_monotone_on_a_grid() {
    let p = pow(2, 24, 7.5).pow;
    let tau = 1.3;
    let grid: Vec<u32> = (0..100).map(|i| difficulty(i as f64 * 0.05, tau, &p)).collect();
    assert!(grid.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(grid[0], 2);
    assert_eq!(grid[99], 24);
}

proptest! {
    #[test]
    fn difficulty_monotone_and_bounded(
        a in -10.0f64..10.0, b in -10.0f64..10.0, tau in -5.0f64..5.0,
        base in 0u32..=24, span in 0u32..=24, slope in 0.0f64..50.0,
    ) {
        let max = (base + span).min(24);
        let p = pow(base, max, slope).pow;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (dl, dh) = (difficulty(lo, tau, &p), difficulty(hi, tau, &p));
        prop_assert!(dl <= dh);
        prop_assert!(dl >= base && dh <= max);
    }
}
