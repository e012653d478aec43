//! He fan-in initialization for convolution and linear weights.

use super::{Conv2d, Element, Linear};
use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Conv weight `[out, in, k, k]` drawn from N(0, 2/fan_in), zero bias.
pub fn conv2d<E: Element, R: Rng>(out: usize, inp: usize, k: usize, rng: &mut R) -> Conv2d<E> {
    let fan_in = (inp * k * k) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
    let weight = Array4::from_shape_fn((out, inp, k, k), |_| E::from_f64(dist.sample(rng)));
    Conv2d::new(weight, Array1::zeros(out))
}

/// Linear weight `[out, in]` drawn from N(0, 2/fan_in), zero bias.
pub fn linear<E: Element, R: Rng>(out: usize, inp: usize, rng: &mut R) -> Linear<E> {
    let dist = Normal::new(0.0, (2.0 / inp as f64).sqrt()).unwrap();
    let weight = Array2::from_shape_fn((out, inp), |_| E::from_f64(dist.sample(rng)));
    Linear::new(weight, Array1::zeros(out))
}
