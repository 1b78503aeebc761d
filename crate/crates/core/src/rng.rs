//! Seeded random streams. Each consumer draws from its own ChaCha stream so
//! that, for example, changing the routing draws never perturbs initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Stream identifiers; values are arbitrary but fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Backbone = 1,
    AdapterInit = 2,
    EchoInit = 3,
    Data = 4,
    Routing = 5,
    Dropout = 6,
    Shuffle = 7,
    Probe = 8,
}

pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// SplitMix64 finalizer, used to derive sub-seeds from (seed, indices).
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Kaiming-uniform with `a = √5`, i.e. `U(−1/√fan_in, 1/√fan_in)`.
pub fn kaiming_uniform(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    uniform_vec(rng, n, 1.0 / (fan_in as f64).sqrt())
}
