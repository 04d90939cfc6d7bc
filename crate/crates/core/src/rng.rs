//! Purpose-split random streams derived from one root seed.
//!
//! Each purpose owns a distinct ChaCha stream, so changing how one consumer
//! draws numbers never shifts the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Masking = 3,
    Negatives = 4,
    HeldOut = 5,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Stream for one purpose at one training step. Derived from the step
/// index alone, so a resumed run draws exactly what an uninterrupted one
/// would have drawn.
pub fn step_stream(seed: u64, purpose: Stream, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step + 1) << 3) | purpose as u64);
    rng
}
