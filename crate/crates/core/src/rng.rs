//! Named, seeded random streams.
//!
//! Every stochastic step in the pipeline draws from an [`RngHandle`], which is
//! a `(seed, stream id)` pair. The same pair always yields the same sequence,
//! and child streams are derived by name so that adding a new consumer never
//! shifts the draws of an existing one.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngHandle {
    pub seed: u64,
    pub stream: String,
}

impl RngHandle {
    pub fn new(seed: u64, stream: impl Into<String>) -> Self {
        Self {
            seed,
            stream: stream.into(),
        }
    }

    /// A child stream, e.g. `root.derive("mae")` -> `"root/mae"`.
    pub fn derive(&self, name: &str) -> Self {
        Self {
            seed: self.seed,
            stream: format!("{}/{}", self.stream, name),
        }
    }

    pub fn derive_indexed(&self, name: &str, index: u64) -> Self {
        self.derive(&format!("{name}#{index}"))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(self.stream.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}
