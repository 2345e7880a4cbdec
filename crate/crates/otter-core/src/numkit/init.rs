//! He-style fan-in weight initialization.

use crate::numkit::tensor::{Scalar, Tensor};
use crate::rng::Rng;

/// Normal(0, sqrt(2/fan_in)) entries.
pub fn he_tensor<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.normal() * std))
}

/// Fan-in for a conv kernel [Cout, Cin, kh, kw].
pub fn conv_fan_in(shape: &[usize]) -> usize {
    shape[1] * shape[2] * shape[3]
}

/// Fan-in for a linear weight [Cout, Cin].
pub fn linear_fan_in(shape: &[usize]) -> usize {
    shape[1]
}
