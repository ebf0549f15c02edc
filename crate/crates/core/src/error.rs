use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FlexError>;

#[derive(Debug, Error)]
pub enum FlexError {
    #[error("SHAPE_MISMATCH: {0}")]
    ShapeMismatch(String),

    #[error("VALUE_RANGE: {0}")]
    ValueRange(String),

    #[error("MISSING_RGB: {0}")]
    MissingRgb(String),

    #[error("EMPTY_BATCH: loss requested on an empty batch")]
    EmptyBatch,

    #[error("ONE_CLASS_ONLY: {0}")]
    OneClassOnly(String),

    #[error("NONFINITE_LOSS: loss became non-finite at epoch {epoch}, batch {batch}")]
    NonfiniteLoss { epoch: usize, batch: usize },

    #[error("PARSE_ERROR: line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("DUPLICATE_ID: sample id `{0}` appears more than once")]
    DuplicateId(String),

    #[error("MISSING_RGB_PATH: line {line}: row `{sample_id}` has no rgb path")]
    MissingRgbPath { line: u64, sample_id: String },

    #[error("FILE_NOT_FOUND: {}", .0.display())]
    FileNotFound(PathBuf),

    #[error("CHECKPOINT_INCOMPATIBLE: {0}")]
    CheckpointIncompatible(String),

    #[error("SHAPE_INVALID: {0}")]
    ShapeInvalid(String),

    #[error("CONFIG_ERROR: `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("INVALID_ARGUMENT: {0}")]
    InvalidArgument(String),

    #[error("IO_ERROR: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON_ERROR: {0}")]
    Json(#[from] serde_json::Error),

    #[error("IMAGE_ERROR: {0}")]
    Image(#[from] image::ImageError),
}

impl FlexError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            FlexError::ShapeMismatch(_) => "SHAPE_MISMATCH",
            FlexError::ValueRange(_) => "VALUE_RANGE",
            FlexError::MissingRgb(_) => "MISSING_RGB",
            FlexError::EmptyBatch => "EMPTY_BATCH",
            FlexError::OneClassOnly(_) => "ONE_CLASS_ONLY",
            FlexError::NonfiniteLoss { .. } => "NONFINITE_LOSS",
            FlexError::Parse { .. } => "PARSE_ERROR",
            FlexError::DuplicateId(_) => "DUPLICATE_ID",
            FlexError::MissingRgbPath { .. } => "MISSING_RGB_PATH",
            FlexError::FileNotFound(_) => "FILE_NOT_FOUND",
            FlexError::CheckpointIncompatible(_) => "CHECKPOINT_INCOMPATIBLE",
            FlexError::ShapeInvalid(_) => "SHAPE_INVALID",
            FlexError::Config { .. } => "CONFIG_ERROR",
            FlexError::InvalidArgument(_) => "INVALID_ARGUMENT",
            FlexError::Io(_) => "IO_ERROR",
            FlexError::Json(_) => "JSON_ERROR",
            FlexError::Image(_) => "IMAGE_ERROR",
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FlexError::Config { key: key.into(), message: message.into() }
    }
}
