//! Seed derivation. Every stage of the pipeline draws its seed from one
//! top-level seed so a whole run is reproducible from a single number.
//!
//! Derivation: a stage label is FNV-1a hashed, xor-ed into the top seed and
//! passed through a splitmix64 finaliser. Chains add their index on top.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Seed for a named pipeline stage ("nuts", "vi", "synth", "scores", ...).
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    splitmix64(seed ^ fnv1a(stage))
}

/// Seed for one sampler chain; chains are independent streams.
pub fn chain_seed(seed: u64, chain_index: u32) -> u64 {
    splitmix64(seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(chain_index as u64 + 1)))
}
