//! Seedable generators. Every component owns its generator; there is no global RNG.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type WkRng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> WkRng {
    WkRng::seed_from_u64(seed)
}

/// Mixes a base seed with an index so per-item streams do not depend on
/// iteration order (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derived(base: u64, index: u64) -> WkRng {
    seeded(derive_seed(base, index))
}
