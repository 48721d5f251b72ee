pub mod error;
pub mod matched_data;
pub mod score_stats;
pub mod sensitivity;

pub use error::{Error, Result};
pub mod fullmatch;
pub mod screening;
pub mod simulation;

/// Independent 64-bit seed for sub-task `k` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut x = seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/matched_data.md")]
    pub mod matched_data {}
    #[doc = include_str!("../../../book/src/sensitivity.md")]
    pub mod sensitivity {}
    #[doc = include_str!("../../../book/src/screening.md")]
    pub mod screening {}
    #[doc = include_str!("../../../book/src/full_matching.md")]
    pub mod full_matching {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    pub mod simulation {}
}
