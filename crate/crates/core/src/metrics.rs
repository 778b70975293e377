//! Detection metrics. Positives are malicious queries; a higher score means
//! more anomalous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPopulation {
    positives: Vec<f64>,
    negatives: Vec<f64>,
}

impl ScoredPopulation {
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Result<Self> {
        if positives.is_empty() || negatives.is_empty() {
            return Err(Error::invalid("both positive and negative scores are required"));
        }
        if positives.iter().chain(&negatives).any(|v| !v.is_finite()) {
            return Err(Error::invalid("scores must be finite"));
        }
        Ok(Self { positives, negatives })
    }

    pub fn positives(&self) -> &[f64] {
        &self.positives
    }

    pub fn negatives(&self) -> &[f64] {
        &self.negatives
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Probability that a random positive outscores a random negative, with
/// half credit for ties.
pub fn auroc(p: &ScoredPopulation) -> f64 {
    let neg = sorted(&p.negatives);
    let mut twice_wins: u64 = 0;
    for &s in &p.positives {
        let below = neg.partition_point(|v| *v < s) as u64;
        let not_above = neg.partition_point(|v| *v <= s) as u64;
        twice_wins += 2 * below + (not_above - below);
    }
    twice_wins as f64 / (2 * p.positives.len() * p.negatives.len()) as f64
}

/// Distinct thresholds in descending order with the cumulative counts of
/// positives and negatives scoring at or above each.
fn sweep(p: &ScoredPopulation) -> Vec<(f64, usize, usize)> {
    let mut all: Vec<(f64, bool)> = p
        .positives
        .iter()
        .map(|v| (*v, true))
        .chain(p.negatives.iter().map(|v| (*v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (i, (v, pos)) in all.iter().enumerate() {
        if *pos {
            tp += 1;
        } else {
            fp += 1;
        }
        if all.get(i + 1).map_or(true, |n| n.0 != *v) {
            out.push((*v, tp, fp));
        }
    }
    out
}

/// Step-wise average precision; equal scores form one threshold.
pub fn aupr(p: &ScoredPopulation) -> f64 {
    let np = p.positives.len() as f64;
    let mut prev_tp = 0;
    let mut ap = 0.0;
    for (_, tp, fp) in sweep(p) {
        if tp > prev_tp {
            ap += (tp as f64 / (tp + fp) as f64) * ((tp - prev_tp) as f64 / np);
            prev_tp = tp;
        }
    }
    ap
}

/// Smallest false positive rate over thresholds whose true positive rate is
/// at least `tpr_target`.
pub fn fpr_at_tpr(p: &ScoredPopulation, tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::invalid(format!("tpr target {tpr_target} outside (0, 1]")));
    }
    let (np, nn) = (p.positives.len() as f64, p.negatives.len() as f64);
    let hit = sweep(p)
        .into_iter()
        .find(|(_, tp, _)| *tp as f64 / np >= tpr_target)
        .expect("the lowest threshold admits every positive");
    Ok(hit.2 as f64 / nn)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr95: f64,
    pub fpr90: f64,
}

pub fn metric_row(p: &ScoredPopulation) -> MetricRow {
    MetricRow {
        auroc: auroc(p),
        aupr: aupr(p),
        fpr95: fpr_at_tpr(p, 0.95).expect("valid target"),
        fpr90: fpr_at_tpr(p, 0.90).expect("valid target"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pop(pos: &[f64], neg: &[f64]) -> ScoredPopulation {
        ScoredPopulation::new(pos.to_vec(), neg.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&pop(&[0.3, 0.9], &[0.1, 0.4])), 0.75);
        assert_eq!(auroc(&pop(&[2.0, 3.0], &[0.0, 1.0])), 1.0);
        assert_eq!(auroc(&pop(&[0.2, 0.5, 0.5], &[0.2, 0.5, 0.5])), 0.5);
    }

    #[test]
    fn aupr_examples() {
        assert_eq!(aupr(&pop(&[2.0, 3.0], &[0.0, 1.0])), 1.0);
        assert_eq!(aupr(&pop(&[10.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0])), 1.0);
        assert!((aupr(&pop(&[0.9, 0.3], &[0.5])) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn fpr_examples() {
        assert_eq!(fpr_at_tpr(&pop(&[2.0, 3.0], &[0.0, 1.0]), 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&pop(&[0.9, 0.5], &[0.4, 0.6]), 1.0).unwrap(), 0.5);
        assert!(fpr_at_tpr(&pop(&[1.0], &[0.0]), 0.0).is_err());
        assert!(fpr_at_tpr(&pop(&[1.0], &[0.0]), 1.5).is_err());
    }

    #[test]
    fn rejects_empty_or_nonfinite() {
        assert!(ScoredPopulation::new(vec![], vec![1.0]).is_err());
        assert!(ScoredPopulation::new(vec![1.0], vec![]).is_err());
        assert!(ScoredPopulation::new(vec![f64::NAN], vec![1.0]).is_err());
    }
}
