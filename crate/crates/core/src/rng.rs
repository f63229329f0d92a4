//! Seeded random streams.
//!
//! Every consumer of randomness (initialisation, shuffling, each dataset
//! generator) draws from its own ChaCha stream keyed by `(seed, stream)`, so
//! adding a draw in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const BLOB_MEANS: u64 = 3;
    pub const BLOB_POINTS: u64 = 4;
    pub const OOD: u64 = 5;
    pub const SPLIT: u64 = 6;
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
