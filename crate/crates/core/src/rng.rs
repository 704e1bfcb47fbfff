//! Seeded, caller-owned random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a
//! `(seed, purpose, index)` triple, so adding a draw in one place never shifts
//! the numbers seen somewhere else.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a purpose tag and an index into a new seed.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = splitmix(seed);
    for b in purpose.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream(seed: u64, purpose: &str, index: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, index))
}

pub fn normal_vec(rng: &mut Stream, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect()
}

pub fn uniform_index(rng: &mut Stream, n: usize) -> usize {
    rng.random_range(0..n)
}

pub fn bernoulli(rng: &mut Stream, p: f64) -> bool {
    rng.random::<f64>() < p
}
