//! Seed derivation.
//!
//! Every random stream in the crate is seeded from a 64-bit value derived
//! by chaining SplitMix64 finalisers:
//!
//! ```text
//! mix(a, b)                       = splitmix64(a ^ splitmix64(b))
//! derive(base, rep, cycle, tag)   = mix(mix(mix(base, rep), cycle), tag)
//! ```
//!
//! where `splitmix64(x)` adds the golden-ratio increment `0x9E3779B97F4A7C15`
//! and applies the standard xor-shift-multiply finaliser. The stream is then
//! a ChaCha8 generator seeded with the derived value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different uses independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedPurpose {
    Selection = 0x005E_1EC7,
    Training = 0x007E_A14E,
    Synthesis = 0x5E7_4E5,
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

pub fn derive_seed(base: u64, repetition: u64, cycle: u64, purpose: SeedPurpose) -> u64 {
    mix(mix(mix(base, repetition), cycle), purpose as u64)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
