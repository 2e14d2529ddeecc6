//! The one PRNG used everywhere: xoshiro256++ seeded through splitmix64.
//!
//! `Xoshiro256PlusPlus::seed_from_u64` expands the seed with splitmix64
//! (increment `0x9e3779b97f4a7c15`, mix constants `0xbf58476d1ce4e5b9` and
//! `0x94d049bb133111eb`), so every stream is a pure function of its `u64`
//! seed on every platform.

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// splitmix64 finalizer; also used as a stateless hash of small integers.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent child seed, e.g. one per level or per component.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Uniform float in `[0, 1)` built from the top 53 bits of one draw.
pub fn unit(rng: &mut Rng) -> f64 {
    (rng.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform integer in `[0, n)` by rejection on the top bits (integer only).
pub fn below(rng: &mut Rng, n: u64) -> u64 {
    assert!(n > 0, "below(0)");
    let zone = u64::MAX - (u64::MAX % n + 1) % n;
    loop {
        let v = rng.random::<u64>();
        if v <= zone {
            return v % n;
        }
    }
}

/// Fisher–Yates shuffle using [`below`].
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Standard normal via Box–Muller on two [`unit`] draws.
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - unit(rng);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
