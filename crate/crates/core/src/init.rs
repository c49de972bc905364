//! Parameter initialization helpers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

/// Sample from a normal distribution truncated to `[-2σ, 2σ]` (by rejection).
pub fn trunc_normal_sample<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(trunc_normal_sample(rng, std))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data length agree")
}
