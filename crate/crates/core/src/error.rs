use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("failed to read volume {path}: {reason}")]
    Unreadable { path: PathBuf, reason: String },

    #[error("failed to write volume {path}: {reason}")]
    Unwritable { path: PathBuf, reason: String },

    #[error("label map contains non-integer value {0}")]
    NonIntegerLabel(f64),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("label volumes must be resampled with nearest-neighbour interpolation")]
    LabelInterpolation,

    #[error("structures do not fit inside a {dims:?} volume: {reason}")]
    PhantomDoesNotFit { dims: [usize; 3], reason: String },

    #[error("label volume is empty")]
    EmptyLabels,

    #[error("network input {dims:?} is invalid: {reason}")]
    InvalidInput { dims: [usize; 3], reason: String },

    #[error("training step {step} requires {what}")]
    MissingPrerequisite { step: u8, what: String },

    #[error("non-finite loss {value} at step {step}, iteration {iteration}")]
    NonFiniteLoss { step: u8, iteration: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
