//! Independent random streams derived from one user seed.
//!
//! Every consumer draws from `(seed, domain, index)`, so results depend only
//! on those three values and never on how many draws happened elsewhere.
//! This is what lets training resume from a checkpoint without storing
//! generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-step reparameterisation noise during training.
pub const TRAIN_NOISE: u64 = 1;
/// Per-epoch shuffle of the labeled pool.
pub const SHUFFLE_LABELED: u64 = 2;
/// Per-epoch shuffle of the unlabeled pool.
pub const SHUFFLE_UNLABELED: u64 = 3;
/// Fixed noise for validation passes.
pub const VALIDATION: u64 = 4;
/// Per-sample latent draws during generation.
pub const GENERATION: u64 = 5;
/// Pair draws and subsampling during evaluation.
pub const EVALUATION: u64 = 6;

const INDEX_BITS: u32 = 40;

/// Generator for item `index` of `domain`. `index` must be below 2⁴⁰.
pub fn derived_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << INDEX_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << INDEX_BITS) | index);
    rng
}
