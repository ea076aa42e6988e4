//! Derivation of independent deterministic RNG streams from one base seed.
//!
//! Every stochastic component (per-user synthesis, epoch shuffles, dropout
//! masks, per-user decoding) gets its stream as a pure function of the base
//! seed and a stream index. Nothing shares mutable RNG state, so parallel
//! schedules cannot perturb results and checkpoint resume only needs the
//! base seed.

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a base seed with one stream index.
pub fn mix(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

/// Combine a base seed with two stream indices.
pub fn mix3(base: u64, a: u64, b: u64) -> u64 {
    mix(mix(base, a), b)
}
