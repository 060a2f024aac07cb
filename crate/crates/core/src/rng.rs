//! Named random substreams derived from a single run seed.
//!
//! Each component draws from its own ChaCha stream so that, for example,
//! changing the dataset jitter never perturbs the sampling noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Data = 1,
    Noise = 2,
    Init = 3,
    Sampling = 4,
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    indexed_substream(seed, stream, 0)
}

/// Substream `index` of `stream`, e.g. one per sampling chain.
pub fn indexed_substream(seed: u64, stream: Stream, index: u32) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 32) | index as u64);
    rng
}
