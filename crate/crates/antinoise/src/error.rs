//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("divisibility violation: {0}")]
    Divisibility(String),

    #[error("non-finite loss in step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("dataset not found: {0}")]
    DatasetNotFound(PathBuf),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("checkpoint mismatch:\n{diff}")]
    CheckpointMismatch { diff: String },

    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Config(_) => "config_error",
            Error::Divisibility(_) => "divisibility_violation",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::DatasetNotFound(_) => "dataset_not_found",
            Error::EmptyDataset(_) => "empty_dataset",
            Error::LabelOutOfRange { .. } => "label_out_of_range",
            Error::CheckpointMismatch { .. } => "checkpoint_mismatch",
            Error::InvalidCheckpoint(_) => "invalid_checkpoint",
            Error::Io(_) => "io_error",
            Error::Image(_) => "image_error",
        }
    }

    /// Process exit code for CLI commands.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DatasetNotFound(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
