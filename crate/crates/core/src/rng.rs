//! Seeded random streams.
//!
//! Every stochastic operation takes a `&mut Stream`. Independent streams are
//! derived from a run seed plus a tag so that reordering work never changes
//! what any one consumer draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A stream keyed by `(seed, tag)`, independent of every other tag.
pub fn substream(seed: u64, tag: u64) -> Stream {
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    s.set_stream(tag);
    s
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seed derived from `seed` and a path of tags, for seeding child computations.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

/// Draws a fresh seed from `parent`, for handing to a child computation.
pub fn fork(parent: &mut Stream) -> u64 {
    parent.random()
}

#[inline]
pub fn normal(s: &mut Stream) -> f64 {
    s.sample(StandardNormal)
}

#[inline]
pub fn uniform(s: &mut Stream, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * s.random::<f64>()
}

/// Uniform point in the disc of radius `r` centred at the origin.
pub fn uniform_disc(s: &mut Stream, r: f64) -> [f64; 2] {
    let radius = r * crate::math::sqrt(s.random::<f64>());
    let angle = uniform(s, 0.0, core::f64::consts::TAU);
    [radius * crate::math::cos(angle), radius * crate::math::sin(angle)]
}

pub fn below(s: &mut Stream, n: usize) -> usize {
    s.random_range(0..n)
}

pub fn shuffle<T>(s: &mut Stream, xs: &mut [T]) {
    use rand::seq::SliceRandom;
    xs.shuffle(s);
}
