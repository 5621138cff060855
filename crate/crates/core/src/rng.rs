//! Seed derivation so every stochastic step is a pure function of
//! `(base seed, purpose, indices)`, independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> DetRng {
    DetRng::seed_from_u64(derive_seed(base, parts))
}

/// Stream tags for [`rng_for`].
pub mod stream {
    pub const SPLITS: u64 = 1;
    pub const TRAIN_EPISODE: u64 = 2;
    pub const TEST_EPISODE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SYNTH_MEAN: u64 = 5;
    pub const SYNTH_SAMPLE: u64 = 6;
    pub const TRAIN_STEP: u64 = 7;
    pub const EVAL_STEP: u64 = 8;
    pub const DIAGNOSTIC: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        let a: u64 = rng_for(3, &[stream::SPLITS]).random();
        let b: u64 = rng_for(3, &[stream::SPLITS]).random();
        assert_eq!(a, b);
    }
}
