//! Per-trajectory random streams.
//!
//! Every trajectory draws from its own ChaCha8 stream keyed by
//! `(master seed, cell index, repetition index)`. The worker that happens to
//! run a trajectory never enters the key, so results do not depend on the
//! size of the thread pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream(master_seed: u64, cell: u64, rep: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((cell << 32) ^ (rep & 0xffff_ffff));
    rng
}

pub fn from_seed(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
