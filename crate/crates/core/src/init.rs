//! Seeded weight initialisation.
//!
//! Values are drawn in `f64` and cast, so an `f32` and an `f64` model built
//! from the same seed carry the same weights up to rounding.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::scalar::Scalar;

pub type SeededRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-component.
pub fn substream(seed: u64, tag: &str) -> SeededRng {
    // FNV-1a over the tag, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<T, D, Sh>(rng: &mut SeededRng, shape: Sh, std: f64) -> Array<T, D>
where
    T: Scalar,
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    Array::from_shape_simple_fn(shape, || {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                return T::c(z * std);
            }
        }
    })
}

pub fn normal<T, D, Sh>(rng: &mut SeededRng, shape: Sh, std: f64) -> Array<T, D>
where
    T: Scalar,
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    let dist = Normal::new(0.0, std).expect("finite std");
    Array::from_shape_simple_fn(shape, || T::c(dist.sample(rng)))
}

pub fn uniform<T, D, Sh>(rng: &mut SeededRng, shape: Sh, lo: f64, hi: f64) -> Array<T, D>
where
    T: Scalar,
    D: Dimension,
    Sh: ShapeBuilder<Dim = D>,
{
    Array::from_shape_simple_fn(shape, || T::c(rng.random_range(lo..hi)))
}
