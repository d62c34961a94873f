use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Samples `normal(0, sqrt(2 / fan_in))`.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidDimension(format!("zero fan-in for shape {shape:?}")));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
}

/// Kaiming normal initialization with fan-in `prod(shape[1..])`.
pub fn kaiming_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.len() < 2 {
        return Err(Error::InvalidDimension(format!("no fan-in axis in shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kaiming_normal(shape, shape[1..].iter().product(), &mut rng)
}
