//! Seeded random streams.
//!
//! Every independent worker (a learning seed, a rewiring sample batch, a
//! simulation) gets its own ChaCha stream derived from a base seed and a
//! counter, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
