//! Seeded random streams. Every stochastic draw in the crate goes through a
//! `ChaCha8Rng` derived from a `u64` seed and a domain label, so results do
//! not depend on call order across unrelated components.

use ndarray::{Array, Dimension, ShapeBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn normal<D: Dimension, Sh: ShapeBuilder<Dim = D>>(
    rng: &mut impl Rng,
    shape: Sh,
    std: f64,
) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

pub fn uniform<D: Dimension, Sh: ShapeBuilder<Dim = D>>(
    rng: &mut impl Rng,
    shape: Sh,
    bound: f64,
) -> Array<f64, D> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    Array::from_shape_simple_fn(shape, || dist.sample(rng))
}
