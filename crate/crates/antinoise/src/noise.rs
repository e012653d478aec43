//! Additive white Gaussian noise for training and robustness evaluation.

use crate::error::{Error, Result};
use crate::nn::Element;
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Default noise standard deviation in normalized-pixel units.
pub const DEFAULT_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Standard deviation of the per-element Gaussian noise.
    pub sigma: f64,
    /// Optional seed; when set the noise is reproducible bit-for-bit.
    pub seed: Option<u64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: DEFAULT_SIGMA, seed: None }
    }
}

impl NoiseSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be non-negative, got {sigma}")));
        }
        Ok(Self { sigma, seed: None })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to an image in `[0,1]`. The output is
/// deliberately not clamped: clamping would bias the noise at the value
/// boundaries and break its zero-mean property.
pub fn add_noise<E: Element>(image: &Array3<E>, spec: &NoiseSpec) -> Result<Array3<E>> {
    if spec.sigma < 0.0 {
        return Err(Error::Config("sigma must be non-negative".into()));
    }
    if spec.sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = match spec.seed {
        Some(s) => ChaCha8Rng::seed_from_u64(s),
        None => ChaCha8Rng::from_rng(&mut rand::rng()),
    };
    Ok(add_noise_with_rng(image, spec.sigma, &mut rng))
}

/// Noise addition driven by a caller-owned RNG; used by the training loops
/// so every draw is attributable to a derived seed.
pub fn add_noise_with_rng<E: Element, R: Rng>(
    image: &Array3<E>,
    sigma: f64,
    rng: &mut R,
) -> Array3<E> {
    if sigma == 0.0 {
        return image.clone();
    }
    let dist = Normal::new(0.0, sigma).unwrap();
    image.mapv(|v| v + E::from_f64(dist.sample(rng)))
}

/// Batch variant of [`add_noise_with_rng`]; samples are noised in index order.
pub fn add_noise_batch<E: Element, R: Rng>(
    images: &Array4<E>,
    sigma: f64,
    rng: &mut R,
) -> Array4<E> {
    if sigma == 0.0 {
        return images.clone();
    }
    let dist = Normal::new(0.0, sigma).unwrap();
    images.mapv(|v| v + E::from_f64(dist.sample(rng)))
}
