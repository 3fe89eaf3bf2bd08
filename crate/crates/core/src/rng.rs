//! Seeded random streams.
//!
//! Every chain owns a ChaCha8 stream keyed by `(seed, stream index)`, so
//! replicate `k` of a run is reproducible regardless of how many worker
//! threads execute the replicates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// Independent stream `stream` derived from `seed`.
pub fn chain_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
