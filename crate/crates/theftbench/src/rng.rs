//! Seed-splitting rule used by every randomized operation.
//!
//! All randomness in the crate flows through [`stream_rng`]: a task with
//! index `i` under master seed `s` draws from the ChaCha8 stream
//! `(seed_from_u64(s), set_stream(i))`. Substreams are statistically
//! independent, so per-record or per-attack work can run in any order
//! without changing results.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive the `stream`-th substream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
