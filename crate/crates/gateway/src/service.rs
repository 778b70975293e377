use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use same_core::data::ImageTensor;
use same_core::detector::{AnomalyRecord, Detector};
use same_core::rng::RngHandle;

use crate::error::{GatewayError, Result};
use crate::policy::{apply_policy, Decision, DefensePolicy};
use crate::pow::{issue_pow, ChallengeTable};

pub const REJECT_CODE: &str = "ANOMALY_SCORE_EXCEEDED";

pub fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum GatewayResponse {
    Prediction {
        probs: Vec<f32>,
    },
    Rejected {
        code: String,
        score: f64,
    },
    Challenge {
        challenge_id: String,
        prefix: String,
        bits: u32,
        expiry: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub policy: DefensePolicy,
    pub challenge_ttl_secs: u64,
    /// Seed for challenge prefixes and ids.
    pub seed: u64,
}

/// Victim behind a calibrated detector. Immutable apart from the challenge
/// table, so it can be shared across request handlers.
pub struct Gateway {
    detector: Detector,
    tau: f64,
    cfg: GatewayConfig,
    challenges: ChallengeTable<Vec<f32>>,
    issued: AtomicU64,
}

impl Gateway {
    pub fn new(detector: Detector, cfg: GatewayConfig) -> Result<Self> {
        cfg.policy.validate()?;
        let tau = detector
            .cfg
            .threshold
            .ok_or_else(|| GatewayError::Policy("detector is not calibrated".into()))?;
        Ok(Self {
            detector,
            tau,
            cfg,
            challenges: ChallengeTable::default(),
            issued: AtomicU64::new(0),
        })
    }

    pub fn detector(&self) -> &Detector {
        &self.detector
    }

    pub fn threshold(&self) -> f64 {
        self.tau
    }

    pub fn policy(&self) -> &DefensePolicy {
        &self.cfg.policy
    }

    pub fn pending_challenges(&self) -> usize {
        self.challenges.len()
    }

    pub fn score(&self, x: &ImageTensor) -> Result<AnomalyRecord> {
        if x.shape() != self.detector.victim.input_shape() {
            return Err(GatewayError::Malformed(format!(
                "expected shape {}, got {}",
                self.detector.victim.input_shape(),
                x.shape()
            )));
        }
        let received = unix_millis();
        let c = self.detector.components(x)?;
        let mut r = self.detector.record(x, c);
        r.received_at_ms = Some(received);
        r.scored_at_ms = Some(unix_millis());
        Ok(r)
    }

    /// Score, apply the policy, respond. `now` is unix seconds.
    pub fn handle(&self, x: &ImageTensor, now: u64) -> Result<GatewayResponse> {
        let record = self.score(x)?;
        let decision = apply_policy(&record, self.tau, &self.cfg.policy)?;
        tracing::info!(score = record.score, query = %record.query_fingerprint, ?decision, "scored query");
        Ok(match decision {
            Decision::Predict => GatewayResponse::Prediction {
                probs: self.detector.victim.predict(x)?,
            },
            Decision::Reject => GatewayResponse::Rejected {
                code: REJECT_CODE.into(),
                score: record.score,
            },
            Decision::Challenge { .. } => {
                self.challenges.purge(now);
                let n = self.issued.fetch_add(1, Ordering::Relaxed);
                let rng = RngHandle::new(self.cfg.seed, "gateway/pow").derive_indexed("challenge", n);
                let c = issue_pow(record.score, self.tau, &self.cfg.policy, x.digest(), now + self.cfg.challenge_ttl_secs, &rng)?;
                let resp = GatewayResponse::Challenge {
                    challenge_id: c.id.clone(),
                    prefix: hex::encode(c.prefix),
                    bits: c.bits,
                    expiry: c.expiry,
                };
                self.challenges.insert(c, self.detector.victim.predict(x)?);
                resp
            }
        })
    }

    /// Exchanges a solved challenge for the withheld prediction; `Ok(None)`
    /// when the nonce does not solve it.
    pub fn redeem(&self, challenge_id: &str, nonce: &[u8], now: u64) -> Result<Option<GatewayResponse>> {
        Ok(self
            .challenges
            .redeem(challenge_id, nonce, now)?
            .map(|probs| GatewayResponse::Prediction { probs }))
    }

    /// Binding hash a client mixes into its solution for query `x`.
    pub fn challenge_binding(x: &ImageTensor) -> [u8; 32] {
        x.digest()
    }
}
