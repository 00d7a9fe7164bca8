//! Named, indexed RNG substreams.
//!
//! Every random decision in the toolkit draws from a stream keyed by
//! `(seed, tag, index)`, so independent concerns (weight init, batch
//! shuffling, reparameterization noise, per-frame generation, evaluation
//! sampling) never share state. This is what makes parallel execution
//! bit-identical to serial and keeps variant trajectories comparable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use drs_tensor::checkpoint::fnv1a64;

pub fn substream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a64(tag.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
