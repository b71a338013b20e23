//! Seeded random streams.
//!
//! Every random decision in the pipeline is drawn from a ChaCha8 generator
//! keyed by `(seed, stream)`, so independent concerns (splits, anchors,
//! initialisation, dropout) never consume each other's numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Split = 1,
    Anchors = 2,
    Preprocess = 3,
    Init = 4,
    Dropout = 5,
    Synthetic = 6,
    HeadInit = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
