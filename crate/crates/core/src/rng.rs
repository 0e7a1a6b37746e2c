//! Seeded random streams.
//!
//! Every stochastic component takes a caller-owned [`RandomStream`]. Child
//! streams are derived from a parent seed and a label, so adding a new
//! consumer never shifts the draws seen by existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomStream = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of labels.
pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(mix(seed), |acc, &l| mix(acc ^ mix(l)))
}

pub fn stream(seed: u64) -> RandomStream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_stream(seed: u64, labels: &[u64]) -> RandomStream {
    stream(derive_seed(seed, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = child_stream(7, &[1, 2]).random();
        let b: u64 = child_stream(7, &[1, 2]).random();
        let c: u64 = child_stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
