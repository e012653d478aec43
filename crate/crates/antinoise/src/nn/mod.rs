//! Minimal CPU neural-network kernels: convolution, normalization,
//! activations, pooling, sub-pixel shuffle, linear layers and losses.
//!
//! Everything is generic over `f32`/`f64` so that training runs in single
//! precision while gradient checks run in double precision through the same
//! code path. All kernels are deterministic: parallel work is reduced in a
//! fixed order.

mod act;
mod conv;
mod linear;
mod loss;
mod norm;
mod pool;
mod shuffle;

pub mod init;

pub use act::{Elu, Relu};
pub use conv::{im2col, Conv2d};
pub use linear::Linear;
pub use loss::{mse, mse_grad, psnr, softmax_cross_entropy, PSNR_CAP_DB};
pub use norm::{BatchNorm1d, BatchNorm2d, Bn1dCache, Bn2dCache, NormMode};
pub use pool::{GlobalAvgPool, GlobalMaxPool, MaxPool2};
pub use shuffle::PixelShuffle;

/// Scalar element type for all kernels. Implemented for `f32` and `f64`.
pub trait Element: ndarray::NdFloat + std::iter::Sum {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Visitor over the trainable arrays of a layer, in a fixed declaration order.
///
/// The same walk is used for parameters and for their gradient mirrors, so a
/// flat parameter vector and a flat gradient vector always align.
pub trait Visit<E: Element> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[E]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [E]));
}
