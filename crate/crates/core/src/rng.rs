//! Seeded randomness helpers. Every stochastic step in the pipeline draws
//! from a ChaCha stream derived from the run seed and a purpose label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type CoreRng = ChaCha8Rng;

/// FNV-1a over a label, used to derive independent sub-streams.
pub fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_rng(seed: u64, label: &str) -> CoreRng {
    let mixed = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .rotate_left(17)
        ^ hash_label(label);
    CoreRng::seed_from_u64(mixed)
}

pub fn standard_normal<G: Rng + ?Sized>(rng: &mut G) -> f64 {
    // Box-Muller; u1 kept away from 0
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Normal(0, std) truncated to two standard deviations.
pub fn truncated_normal<G: Rng + ?Sized>(rng: &mut G, std: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn shuffle<T, G: Rng + ?Sized>(rng: &mut G, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
