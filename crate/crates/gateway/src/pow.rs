//! Hash-preimage puzzles: find a nonce such that
//! `SHA-256(prefix || nonce || binding)` starts with `bits` zero bits.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use same_core::rng::RngHandle;

use crate::error::{GatewayError, Result};
use crate::policy::{difficulty, DefensePolicy, PolicyKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PowChallenge {
    pub id: String,
    pub prefix: [u8; 16],
    pub bits: u32,
    /// Unix seconds after which the challenge is void.
    pub expiry: u64,
    /// Digest of the query the challenge unlocks.
    pub binding: [u8; 32],
}

pub fn leading_zero_bits(h: &[u8]) -> u32 {
    let mut n = 0;
    for b in h {
        if *b == 0 {
            n += 8;
        } else {
            return n + b.leading_zeros();
        }
    }
    n
}

pub fn pow_hash(c: &PowChallenge, nonce: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(c.prefix);
    h.update(nonce);
    h.update(c.binding);
    h.finalize().into()
}

/// Checks a solution without consuming anything. Expired challenges are an
/// error rather than `false`.
pub fn verify_pow(c: &PowChallenge, nonce: &[u8], now: u64) -> Result<bool> {
    if now > c.expiry {
        return Err(GatewayError::Expired(c.id.clone()));
    }
    Ok(leading_zero_bits(&pow_hash(c, nonce)) >= c.bits)
}

/// Brute-force solver counting nonces from `start`. Returns the nonce
/// (8 bytes, little-endian) and the number of attempts.
pub fn solve(c: &PowChallenge, start: u64) -> (Vec<u8>, u64) {
    let mut n = start;
    loop {
        let nonce = n.to_le_bytes();
        if leading_zero_bits(&pow_hash(c, &nonce)) >= c.bits {
            return (nonce.to_vec(), n - start + 1);
        }
        n = n.wrapping_add(1);
    }
}

/// Builds a challenge whose difficulty follows the policy's score mapping.
pub fn issue_pow(score: f64, tau: f64, policy: &DefensePolicy, binding: [u8; 32], expiry: u64, rng: &RngHandle) -> Result<PowChallenge> {
    if policy.kind != PolicyKind::Pow {
        return Err(GatewayError::Policy("challenges are only issued under the pow policy".into()));
    }
    policy.validate()?;
    let mut r = rng.rng();
    let mut prefix = [0u8; 16];
    r.fill_bytes(&mut prefix);
    let mut id = [0u8; 16];
    r.fill_bytes(&mut id);
    Ok(PowChallenge {
        id: hex::encode(id),
        prefix,
        bits: difficulty(score, tau, &policy.pow),
        expiry,
        binding,
    })
}

/// Outstanding challenges and what each one unlocks. Entries are removed
/// on successful verification or when found expired.
pub struct ChallengeTable<T> {
    inner: Mutex<HashMap<String, (PowChallenge, T)>>,
}

impl<T> Default for ChallengeTable<T> {
    fn default() -> Self {
        Self {
            inner: Mutex::new(HashMap::new()),
        }
    }
}

impl<T> ChallengeTable<T> {
    pub fn insert(&self, c: PowChallenge, payload: T) {
        self.inner.lock().expect("challenge table poisoned").insert(c.id.clone(), (c, payload));
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("challenge table poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Ok(Some(payload))` on a valid solution (consuming the challenge),
    /// `Ok(None)` on a wrong nonce (challenge stays open).
    pub fn redeem(&self, id: &str, nonce: &[u8], now: u64) -> Result<Option<T>> {
        let mut map = self.inner.lock().expect("challenge table poisoned");
        let Some((c, _)) = map.get(id) else {
            return Err(GatewayError::UnknownChallenge(id.to_string()));
        };
        match verify_pow(c, nonce, now) {
            Ok(true) => Ok(map.remove(id).map(|(_, p)| p)),
            Ok(false) => Ok(None),
            Err(e) => {
                map.remove(id);
                Err(e)
            }
        }
    }

    /// Drops every challenge that expired before `now`.
    pub fn purge(&self, now: u64) {
        self.inner.lock().expect("challenge table poisoned").retain(|_, (c, _)| c.expiry >= now);
    }
}
