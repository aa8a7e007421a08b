//! Named deterministic RNG streams.
//!
//! Every random decision in the pipeline draws from a ChaCha8 stream keyed
//! by (global seed, purpose name), e.g. `"init"`, `"augment/finetune/12"`.
//! Streams are mutually independent, so adding draws to one never shifts
//! another, and per-epoch names make checkpoint resume trivial: no RNG
//! state is saved, the stream is re-derived from the epoch number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut h = basis;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// ChaCha8 stream for `name` under the global `seed`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let n = name.as_bytes();
    key[8..16].copy_from_slice(&fnv1a(n, 0xcbf29ce484222325).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a(n, 0x9e3779b97f4a7c15).to_le_bytes());
    key[24..32].copy_from_slice(&fnv1a(n, 0x2545f4914f6cdd1d).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_independent_and_stable() {
        let a1 = named_rng(7, "init").next_u64();
        let a2 = named_rng(7, "init").next_u64();
        assert_eq!(a1, a2);
        let b = named_rng(7, "augment").next_u64();
        assert_ne!(a1, b);
        let c = named_rng(8, "init").next_u64();
        assert_ne!(a1, c);
    }

    #[test]
    fn draws_on_one_stream_leave_another_unchanged() {
        let mut aug = named_rng(3, "augment");
        for _ in 0..100 {
            aug.next_u64();
        }
        assert_eq!(named_rng(3, "init").next_u64(), named_rng(3, "init").next_u64());
    }
}
