//! Deterministic seed derivation.
//!
//! Every stochastic component draws from its own substream derived by mixing
//! a master seed with fixed stream tags (and indices such as band number,
//! epoch, or step). Components therefore stay independent and individually
//! reproducible: regenerating one band's noise never consumes draws that
//! belong to another band or component.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the noise synthesizer and trainer. Values are part of the
/// reproducibility contract: changing them changes every derived realization.
pub mod stream {
    /// Per-band sigma draw for non-i.i.d. Gaussian noise.
    pub const SIGMA: u64 = 1;
    /// Per-band Gaussian sample stream.
    pub const GAUSS: u64 = 2;
    /// Stripe column/offset draws.
    pub const STRIPE: u64 = 3;
    /// Deadline run draws.
    pub const DEADLINE: u64 = 4;
    /// Impulse location/value draws.
    pub const IMPULSE: u64 = 5;
    /// Which bands a structured component affects.
    pub const SELECT: u64 = 6;
    /// Per-band component coin flips in the mixed-corruption case.
    pub const COMBO: u64 = 7;
    /// Blind-Gaussian sigma choice per sample.
    pub const BLIND: u64 = 8;
    /// Epoch shuffling of the training set.
    pub const SHUFFLE: u64 = 9;
    /// Per-batch noise seeds during training.
    pub const TRAIN_NOISE: u64 = 10;
    /// Patch crop/augmentation draws.
    pub const PATCH: u64 = 11;
    /// Validation split selection.
    pub const VAL_SPLIT: u64 = 12;
    /// Weight initialization.
    pub const INIT: u64 = 13;
    /// Synthetic cube generator.
    pub const SYNTH: u64 = 14;
    /// Per-stage master seeds in the incremental schedule.
    pub const STAGE: u64 = 15;
    /// Per-batch noise-case choice in the mixed-noise stage.
    pub const CASE: u64 = 16;
}

/// SplitMix64 finalizer; full-avalanche 64-bit mixer.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a stream/index `tag`.
///
/// Splits compose: `split(split(seed, stream), index)` gives per-index
/// substreams within a stream.
#[inline]
pub fn split(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(27))
}

/// Derive a child seed from a stream tag and two indices.
#[inline]
pub fn split3(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    split(split(split(seed, tag), a), b)
}

/// Counter-based RNG for one substream.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
