//! Seed derivation. Every stochastic component takes an explicit generator; parallel
//! work derives per-item seeds from `(master, stream, index)` so results never depend
//! on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(master: u64, stream: u64, index: u64) -> Rng {
    seeded(derive_seed(master, stream, index))
}

/// Stream tags so unrelated consumers of one master seed never share a sequence.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const TEXT_TABLE: u64 = 3;
    pub const VAE_INIT: u64 = 10;
    pub const VAE_TRAIN: u64 = 11;
    pub const DENOISER_INIT: u64 = 20;
    pub const DENOISER_TRAIN: u64 = 21;
    pub const EXTRACTOR_INIT: u64 = 30;
    pub const EXTRACTOR_TRAIN: u64 = 31;
    pub const EVALUATE: u64 = 40;
    pub const SAMPLE: u64 = 50;
    pub const ANALYSIS: u64 = 60;
    pub const ABLATE: u64 = 70;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_distinct_across_streams_and_indices() {
        let a = derive_seed(42, 1, 0);
        let b = derive_seed(42, 1, 1);
        let c = derive_seed(42, 2, 0);
        let d = derive_seed(43, 1, 0);
        assert!(a != b && a != c && a != d && b != c);
        assert_eq!(a, derive_seed(42, 1, 0));
    }
}
