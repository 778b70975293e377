//! HTTP gateway serving a victim model behind the anomaly detector, with
//! monitor, reject and proof-of-work response policies.

mod error;
pub mod http;
pub mod policy;
pub mod pow;
pub mod service;

pub use error::{GatewayError, Result};
pub use policy::{apply_policy, difficulty, Decision, DefensePolicy, PolicyKind, PowParams};
pub use pow::{issue_pow, solve, verify_pow, ChallengeTable, PowChallenge};
pub use service::{Gateway, GatewayConfig, GatewayResponse, REJECT_CODE};
