//! Seed derivation for the independent random streams of a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream identifiers into a new seed.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, parts))
}

// Stream tags keep draws for different purposes from sharing a generator.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_DATA: u64 = 2;
pub(crate) const TAG_NOISE: u64 = 3;
pub(crate) const TAG_SHUFFLE: u64 = 4;
pub(crate) const TAG_REPLAY: u64 = 5;
pub(crate) const TAG_SELECT: u64 = 6;
pub(crate) const TAG_CONSOLIDATE: u64 = 7;
pub(crate) const TAG_SPLIT: u64 = 8;
pub(crate) const TAG_REFERENCE: u64 = 9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_paths_give_distinct_seeds() {
        assert_ne!(derive(1, &[2, 3]), derive(1, &[3, 2]));
        assert_ne!(derive(1, &[2]), derive(2, &[2]));
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
    }
}
