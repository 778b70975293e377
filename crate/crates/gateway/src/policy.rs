use serde::{Deserialize, Serialize};

use same_core::detector::{classify_query, AnomalyRecord, Verdict};

use crate::error::{GatewayError, Result};

pub const MAX_POW_BITS: u32 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Reject,
    Pow,
    Monitor,
}

impl std::str::FromStr for PolicyKind {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reject" => Ok(Self::Reject),
            "pow" => Ok(Self::Pow),
            "monitor" => Ok(Self::Monitor),
            other => Err(GatewayError::Policy(format!("unknown policy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowParams {
    pub base_bits: u32,
    pub max_bits: u32,
    /// Extra bits per unit of score above the threshold.
    pub slope: f64,
}

impl Default for PowParams {
    fn default() -> Self {
        Self {
            base_bits: 4,
            max_bits: 20,
            slope: 4.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefensePolicy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub pow: PowParams,
}

impl DefensePolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            pow: PowParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pow;
        if p.base_bits > p.max_bits || p.max_bits > MAX_POW_BITS {
            return Err(GatewayError::Policy(format!(
                "pow bits must satisfy 0 <= base ({}) <= max ({}) <= {MAX_POW_BITS}",
                p.base_bits, p.max_bits
            )));
        }
        if !(p.slope >= 0.0 && p.slope.is_finite()) {
            return Err(GatewayError::Policy(format!("pow slope {} must be finite and non-negative", p.slope)));
        }
        Ok(())
    }
}

/// `clamp(base + floor(slope * max(0, score - tau)), base, max)`.
pub fn difficulty(score: f64, tau: f64, p: &PowParams) -> u32 {
    let excess = (score - tau).max(0.0);
    let extra = (p.slope * excess).floor();
    // NaN scores land on the maximum.
    if extra.is_nan() || extra >= (p.max_bits - p.base_bits) as f64 {
        return p.max_bits;
    }
    p.base_bits + extra as u32
}

/// What the gateway should do with a scored query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decision {
    Predict,
    Reject,
    Challenge { bits: u32 },
}

pub fn apply_policy(record: &AnomalyRecord, tau: f64, policy: &DefensePolicy) -> Result<Decision> {
    policy.validate()?;
    Ok(match policy.kind {
        PolicyKind::Monitor => Decision::Predict,
        PolicyKind::Reject => {
            if classify_query(record, tau) == Verdict::Malicious {
                Decision::Reject
            } else {
                Decision::Predict
            }
        }
        PolicyKind::Pow => Decision::Challenge {
            bits: difficulty(record.score, tau, &policy.pow),
        },
    })
}
