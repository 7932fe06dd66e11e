//! Named random sub-streams derived from one top-level seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that an
//! ablation which disables one consumer leaves the others bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Init,
    DataShuffle,
    Masking,
    Gumbel,
    Dropout,
    Synthetic,
    Subsample,
    GeneratorShuffle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::DataShuffle => 2,
            Stream::Masking => 3,
            Stream::Gumbel => 4,
            Stream::Dropout => 5,
            Stream::Synthetic => 6,
            Stream::Subsample => 7,
            Stream::GeneratorShuffle => 8,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Stream for a sub-task (e.g. one model of several) under the same name.
pub fn substream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    stream(derive_seed(seed, index), which)
}

/// Seed for the `index`-th child of `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
