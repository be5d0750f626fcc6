//! Seed derivation and RNG construction.
//!
//! All randomness flows from explicit u64 seeds. Child streams (per episode,
//! per training step, per worker) are derived with splitmix64 so that results
//! do not depend on scheduling or on how many draws another stream consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step: decorrelates nearby seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over a string, for stable name-keyed seed derivation.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a master seed and a numeric stream id.
pub fn child_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

/// Derives a child seed from a master seed and a string tag.
pub fn tagged_seed(master: u64, tag: &str) -> u64 {
    child_seed(master, fnv1a(tag))
}

/// The crate-wide deterministic RNG.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let a = child_seed(42, 0);
        let b = child_seed(42, 1);
        assert_ne!(a, b);
        assert_eq!(a, child_seed(42, 0));
        assert_ne!(tagged_seed(42, "noise"), tagged_seed(42, "data"));
    }

    #[test]
    fn rng_reproduces() {
        let mut r1 = rng_from_seed(7);
        let mut r2 = rng_from_seed(7);
        let xs: Vec<u64> = (0..8).map(|_| r1.gen()).collect();
        let ys: Vec<u64> = (0..8).map(|_| r2.gen()).collect();
        assert_eq!(xs, ys);
    }
}
