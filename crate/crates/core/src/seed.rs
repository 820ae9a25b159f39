//! Deterministic seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64-style mix of a base seed with a stream index.
pub fn derive(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream))
}

/// Stream ids used across the crate, so unrelated consumers never share a stream.
pub mod stream {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SUBSAMPLE: u64 = 4;
    pub const DECODE: u64 = 5;
    pub const TRAJECTORY_BASE: u64 = 1 << 32;
}

#[cfg(test)]
mod tests {
    #[test]
    fn distinct_streams_differ() {
        assert_ne!(super::derive(0, 1), super::derive(0, 2));
        assert_ne!(super::derive(1, 1), super::derive(0, 1));
        assert_eq!(super::derive(7, 9), super::derive(7, 9));
    }
}
