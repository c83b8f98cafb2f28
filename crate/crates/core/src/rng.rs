//! Per-sample random streams.
//!
//! Every sample draws from its own ChaCha20 stream keyed by the corpus seed
//! and selected by a hash of the sample id, so regenerating any subset of a
//! corpus, in any order or on any shard, reproduces the same draws.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::hash::fnv1a64;

/// Generator for one sample, determined by `(corpus_seed, sample_id)`.
pub fn sample_rng(corpus_seed: u64, sample_id: &str) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(corpus_seed);
    rng.set_stream(fnv1a64(sample_id.as_bytes()));
    rng
}

/// Generator for the `index`-th item of a named family.
pub fn indexed_rng(corpus_seed: u64, family: &str, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(corpus_seed ^ fnv1a64(family.as_bytes()));
    rng.set_stream(index);
    rng
}

/// A fair coin from exactly one 64-bit draw.
pub fn coin(rng: &mut impl RngCore) -> bool {
    rng.next_u64() < 1u64 << 63
}

/// Bernoulli(p) from exactly one 64-bit draw, for any `p` in [0, 1].
pub fn bernoulli(rng: &mut impl RngCore, p: f64) -> bool {
    // 53 high bits -> uniform in [0, 1)
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    u < p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_stable_and_distinct() {
        let a1 = sample_rng(7, "utt-1").next_u64();
        let a2 = sample_rng(7, "utt-1").next_u64();
        let b = sample_rng(7, "utt-2").next_u64();
        let c = sample_rng(8, "utt-1").next_u64();
        assert_eq!(a1, a2);
        assert_ne!(a1, b);
        assert_ne!(a1, c);
    }

    #[test]
    fn bernoulli_extremes() {
        let mut rng = sample_rng(1, "x");
        for _ in 0..1000 {
            assert!(bernoulli(&mut rng, 1.0));
            assert!(!bernoulli(&mut rng, 0.0));
        }
    }
}
