//! Deterministic random streams derived from a user seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream used to shuffle the training set in `epoch`.
pub fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(seed, 2 * epoch as u64)
}

/// Stream used for dropout masks in `epoch`.
pub fn dropout_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    stream_rng(seed, 2 * epoch as u64 + 1)
}
