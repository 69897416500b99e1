//! Run-owned deterministic randomness.
//!
//! Every sampling site takes an explicit `&mut RunRng` (a seeded
//! counter-based ChaCha stream); sub-streams for scenes, epochs, and
//! components are derived by mixing the run seed with purpose tags, so
//! results are independent of evaluation order and thread schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type RunRng = ChaCha8Rng;

pub fn seed_rng(seed: u64) -> RunRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// splitmix64 finalizer.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derives an independent seed from (seed, tag, index).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    mix(mix(seed ^ mix(tag)).wrapping_add(index))
}

pub fn derived_rng(seed: u64, tag: u64, index: u64) -> RunRng {
    seed_rng(derive_seed(seed, tag, index))
}

/// Stream tags so different purposes never share a substream.
pub mod tags {
    pub const SCENE: u64 = 0x5343454e;
    pub const INIT: u64 = 0x494e4954;
    pub const EPOCH: u64 = 0x45504f43;
    pub const EVAL: u64 = 0x4556414c;
    pub const LOSS: u64 = 0x4c4f5353;
}

pub fn standard_normal(rng: &mut RunRng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn standard_normal_vec(rng: &mut RunRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// N(0, std²) i.i.d. entries.
pub fn normal_vec(rng: &mut RunRng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * standard_normal(rng)).collect()
}
