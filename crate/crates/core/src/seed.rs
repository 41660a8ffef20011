//! Deterministic derivation of independent seeds from one base seed.

/// SplitMix64 finalizer over `(base, stream)`; distinct streams give
/// statistically independent seeds.
pub fn mix(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named seed streams used by the training and evaluation code.
pub mod stream {
    pub const GENERATOR_INIT: u64 = 1 << 32;
    pub const PROJECTIONS: u64 = 2 << 32;
    pub const DISCRIMINATOR_INIT: u64 = 3 << 32;
    pub const EPOCH_SHUFFLE: u64 = 4 << 32;
    pub const STEP_NOISE: u64 = 5 << 32;
    pub const SAMPLING: u64 = 6 << 32;
    pub const FRAMES_INDEX: u64 = 7 << 32;
}
