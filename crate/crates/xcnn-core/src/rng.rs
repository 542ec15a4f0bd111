//! Seed derivation.
//!
//! Every stochastic consumer (weight init, shuffling, dropout, augmentation,
//! synthetic data) gets its own ChaCha stream derived from the master seed and
//! a purpose tag, so adding a draw in one place can never shift the stream of
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags.  The numeric values are part of the reproducibility contract:
/// changing them changes every seeded run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Dropout,
    Augment,
    Synthetic,
    Ascent,
    Projection,
    Subset,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::Shuffle => 0x02,
            Stream::Dropout => 0x03,
            Stream::Augment => 0x04,
            Stream::Synthetic => 0x05,
            Stream::Ascent => 0x06,
            Stream::Projection => 0x07,
            Stream::Subset => 0x08,
        }
    }
}

/// splitmix64 finaliser; decorrelates structured inputs like (seed, epoch).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, a: u64, b: u64) -> u64 {
    mix(mix(mix(master ^ mix(stream.tag())) ^ mix(a)) ^ mix(b))
}

/// The one RNG constructor used across the engine.
pub fn stream_rng(master: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, a, b))
}
