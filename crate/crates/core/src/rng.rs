//! Seeded, splittable pseudo-random streams.
//!
//! Every stochastic routine draws from xoshiro256++ seeded through
//! SplitMix64 (`seed_from_u64`). Independent sub-streams are obtained with
//! the generator's 2^128-step `jump`, so stream `s` of seed `x` is
//! `seed_from_u64(x)` advanced by `s` jumps.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Named sub-streams used across the crate.
pub mod streams {
    pub const SYNTH_LAYOUT: u64 = 0;
    pub const SYNTH_TRAIN: u64 = 1;
    pub const SYNTH_ID_TEST: u64 = 2;
    pub const SYNTH_OOD_TEST: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAIN_LOOP: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
}

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = seeded(seed);
    for _ in 0..stream {
        rng.jump();
    }
    rng
}

#[inline]
pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}
