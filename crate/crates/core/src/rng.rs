//! Seedable RNG streams.
//!
//! Every randomized stage draws from its own ChaCha stream, keyed by
//! `(seed, purpose)`. Separate streams keep the draws of one stage (say,
//! batch shuffling) independent of how many draws another stage (dropout,
//! noise) consumed, which is what makes run-level determinism hold even
//! when configurations toggle individual stages on and off.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for RNG streams. The discriminant is the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init = 0,
    /// Batch shuffling in the training loop.
    Shuffle = 1,
    /// Dropout masks.
    Dropout = 2,
    /// Gaussian noise for DP perturbation.
    Noise = 3,
    /// Synthetic corpus generation.
    Synth = 4,
    /// Dataset split assignment.
    Split = 5,
    /// Attack split construction and attack-model training.
    Attack = 6,
}

/// An RNG on the given purpose stream of `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// A per-record RNG, used so per-example work (dropout during per-example
/// gradient passes) is reproducible independent of evaluation order.
pub fn record_rng(seed: u64, stream: Stream, record_index: u64) -> ChaCha8Rng {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(u128::from(record_index) << 40);
    rng
}
