//! Seed expansion into independent named random streams.
//!
//! Every random draw in the crate comes from `stream(seed, Stream::X)`, so
//! switching a feature off (e.g. feature corruption) never shifts the draws
//! seen by another consumer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Augment = 2,
    Corrupt = 3,
    Split = 4,
    FewShot = 5,
    Synthetic = 6,
    GradCheck = 7,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
