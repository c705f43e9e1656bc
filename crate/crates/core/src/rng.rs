//! Independent seed streams derived from one run seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Noise = 1,
    Tree = 2,
    ActiveSet = 3,
}

/// Seed for one sub-stream. Streams of the same run seed never overlap.
pub fn sub_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, stream))
}
