use same_core::rng::RngHandle;
use same_gateway::pow::leading_zero_bits;
use same_gateway::{issue_pow, solve, verify_pow, ChallengeTable, DefensePolicy, GatewayError, PolicyKind, PowChallenge, PowParams};

fn challenge(bits: u32, i: u64) -> PowChallenge {
    let policy = DefensePolicy {
        kind: PolicyKind::Pow,
        pow: PowParams {
            base_bits: bits,
            max_bits: bits,
            slope: 0.0,
        },
    };
    issue_pow(0.0, 0.0, &policy, [7; 32], 1_000, &RngHandle::new(3, "pow").derive_indexed("c", i)).unwrap()
}

#[test]
fn leading_zeros() {
    assert_eq!(leading_zero_bits(&[0xff]), 0);
    assert_eq!(leading_zero_bits(&[0x00, 0x10]), 11);
    assert_eq!(leading_zero_bits(&[0, 0]), 16);
}

#[test]
fn zero_difficulty_accepts_anything() {
    let c = challenge(0, 0);
    for n in [&b""[..], b"x", &[0xff; 8]] {
        assert!(verify_pow(&c, n, 0).unwrap());
    }
}

#[test]
fn solution_round_trip_and_bit_flip() {
    let c = challenge(8, 1);
    let (nonce, _) = solve(&c, 0);
    assert!(verify_pow(&c, &nonce, 0).unwrap());
    let mut rejected = 0;
    for bit in 0..64 {
        let mut bad = nonce.clone();
        bad[bit / 8] ^= 1 << (bit % 8);
        if !verify_pow(&c, &bad, 0).unwrap() {
            rejected += 1;
        }
    }
    // each flip independently passes with probability 2^-8
    assert!(rejected >= 60, "{rejected}");
}

#[test]
fn solution_is_bound_to_the_query() {
    let mut transferred = 0;
    for i in 0..20 {
        let c = challenge(10, 200 + i);
        let (nonce, _) = solve(&c, 0);
        let mut other = c.clone();
        other.binding[0] ^= 1;
        if verify_pow(&other, &nonce, 0).unwrap() {
            transferred += 1;
        }
    }
    assert!(transferred <= 1, "{transferred}");
}

#[test]
fn mean_attempts_at_eight_bits() {
    let total: u64 = (0..20).map(|i| solve(&challenge(8, 100 + i), 0).1).sum();
    let mean = total as f64 / 20.0;
    assert!((128.0..=1024.0).contains(&mean), "mean attempts {mean}");
}

#[test]
fn expiry_is_an_error_not_false() {
    let c = challenge(0, 3);
    assert!(matches!(verify_pow(&c, b"", 1_001), Err(GatewayError::Expired(_))));
}

#[test]
fn table_is_single_use() {
    let t = ChallengeTable::default();
    let c = challenge(8, 4);
    let (nonce, _) = solve(&c, 0);
    t.insert(c.clone(), "payload");
    let wrong = (0u64..).map(|n| n.to_le_bytes().to_vec()).find(|n| !verify_pow(&c, n, 0).unwrap()).unwrap();
    assert_eq!(t.redeem(&c.id, &wrong, 0).unwrap(), None);
    assert_eq!(t.redeem(&c.id, &nonce, 0).unwrap(), Some("payload"));
    assert!(matches!(t.redeem(&c.id, &nonce, 0), Err(GatewayError::UnknownChallenge(_))));
}

#[test]
fn table_drops_expired_challenges() {
    let t = ChallengeTable::default();
    let c = challenge(0, 5);
    t.insert(c.clone(), ());
    assert!(matches!(t.redeem(&c.id, b"", 2_000), Err(GatewayError::Expired(_))));
    assert!(t.is_empty());
    t.insert(challenge(0, 6), ());
    t.purge(5_000);
    assert!(t.is_empty());
}

#[test]
fn non_pow_policy_cannot_issue() {
    let p = DefensePolicy::new(PolicyKind::Reject);
    assert!(issue_pow(1.0, 0.0, &p, [0; 32], 0, &RngHandle::new(0, "x")).is_err());
}
