pub mod blob;
pub mod clustering;
pub mod data;
pub mod evaluate;
pub mod neighbors;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod raster;
pub mod ssl;
pub mod synth;

/// Mixes a sequence of integers into one RNG seed (SplitMix64 finaliser per step).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}
