//! Noise-robust image classification via progressive multi-task training.
//!
//! The crate trains a staged convolutional backbone together with
//! denoising-recognition heads attached to intermediate stages. Training is
//! progressive: each head (shallow to deep) and then the whole backbone gets
//! its own optimization step per batch, each on a freshly noised input and
//! each driven by a sharpness-aware two-pass optimizer. A matching
//! distillation loop transfers the result into a plain backbone with zero
//! inference overhead.
//!
//! Start with the runnable programs in `examples/` — one per capability —
//! or the `antinoise` binary, which exposes the same capabilities as
//! subcommands.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod drh;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod plot;
pub mod pmal;
pub mod pmd;
pub mod sam;

pub use error::{Error, Result};
