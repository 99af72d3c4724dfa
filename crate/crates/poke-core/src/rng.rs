//! Seeded randomness.
//!
//! One ChaCha8 generator per purpose: a base seed selects the experiment,
//! [`stream`] splits it into independent substreams for dataset generation,
//! weight init, per-epoch shuffling, per-episode rollouts, and so on.
//! Substreams never overlap, so adding draws to one consumer cannot perturb
//! another.
//!
//! The u64-to-float mappings (uniform, normal, shuffle) are spelled out here
//! rather than pulled from a distributions crate so that generated datasets
//! are pinned by this file alone.

pub use rand_chacha::ChaCha8Rng;
pub use rand_core::RngCore;
use rand_core::SeedableRng;

/// Purpose tag for a derived generator stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Dataset = 1,
    WeightInit = 2,
    EpochShuffle = 3,
    Episode = 4,
    GradCheck = 5,
    Planner = 6,
}

/// Derives the generator for (`seed`, `kind`, `index`).
///
/// Streams with distinct (kind, index) pairs are independent ChaCha8
/// streams over the same key, so the draw order inside one stream never
/// affects any other.
pub fn stream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    debug_assert!(index < 1 << 56);
    rng.set_stream(((kind as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Uniform draw from `[0, 1)` using the top 53 bits of one u64.
#[inline]
pub fn uniform01(rng: &mut impl RngCore) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (rng.next_u64() >> 11) as f64 * SCALE
}

/// Uniform draw from `[lo, hi)`.
#[inline]
pub fn uniform_in(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform01(rng)
}

/// Unbiased uniform draw from `0..n` by rejection.
pub fn uniform_below(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "uniform_below: empty range");
    let n = n as u64;
    // Largest v such that [0, v] covers a whole number of residue classes.
    let zone = u64::MAX - (u64::MAX % n + 1) % n;
    loop {
        let v = rng.next_u64();
        if v <= zone {
            return (v % n) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i + 1);
        items.swap(i, j);
    }
}

/// One pair of independent standard normal draws (Box-Muller).
///
/// Consumes exactly two u64s.
pub fn normal_pair(rng: &mut impl RngCore) -> (f64, f64) {
    use crate::fmath::{cos, ln, sin, sqrt};
    // 1 - uniform01 lies in (0, 1], keeping ln away from zero.
    let u1 = 1.0 - uniform01(rng);
    let u2 = uniform01(rng);
    let r = sqrt(-2.0 * ln(u1));
    let phi = core::f64::consts::TAU * u2;
    (r * cos(phi), r * sin(phi))
}

/// Stateless hash of a record index to `[0, 1)` (splitmix64 finalizer).
///
/// Used to carve held-out splits that are stable under shuffling and
/// dataset-size changes: a record keeps its split membership forever.
pub fn index_hash01(index: u64, salt: u64) -> f64 {
    let mut z = index.wrapping_add(salt).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (z >> 11) as f64 * SCALE
}
