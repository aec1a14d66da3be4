//! Deterministic seed derivation for the simulation pipeline.
//!
//! Every random draw in the crate is keyed off a user seed mixed with the
//! coordinates of the draw (device, session, frame, antenna, purpose). The
//! mixer is a SplitMix64 chain, so nearby coordinates produce uncorrelated
//! streams and the same inputs always give the same seed.

/// One SplitMix64 step.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of coordinate values into a new seed.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    state
}

/// Stable 64-bit hash of a string token (FNV-1a), for mixing identifiers.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
