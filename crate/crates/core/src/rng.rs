//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, label)`, so
//! adding or removing one consumer (a parameter slot, a record) never shifts
//! the numbers another one sees.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type StreamRng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

pub fn uniform(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// A draw from N(0, std²).
pub fn normal(rng: &mut StreamRng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    std * z
}

pub fn shuffle<T>(rng: &mut StreamRng, items: &mut [T]) {
    items.shuffle(rng);
}
