//! Counter-keyed random streams.
//!
//! Every stochastic draw in the crate comes from a generator keyed by
//! `(seed, purpose, a, b)`, e.g. `(seed, Bootstrap, replicate, area)`. The key
//! fills the full 256-bit ChaCha key, so streams never overlap and results do
//! not depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; part of the key so that different consumers of
/// the same seed draw independent numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Population = 1,
    Bootstrap = 2,
    StudyBootstrapSeed = 3,
}

pub fn keyed_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
