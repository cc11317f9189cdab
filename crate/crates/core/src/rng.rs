//! Independent, seeded random streams per purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Batches = 3,
    Masking = 4,
    Gumbel = 5,
    Reset = 6,
    Sampling = 7,
    ModelInit = 8,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Stream for one training step, so resumed runs draw the same numbers.
pub fn step_stream(seed: u64, purpose: Stream, step: usize) -> ChaCha8Rng {
    let mixed = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    stream(mixed, purpose)
}
