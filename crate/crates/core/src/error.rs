use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation pipeline.
#[derive(Debug, Error)]
pub enum SegError {
    /// Tensor or mask dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),
    /// Invalid model or training configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset layout or file content problems.
    #[error("load error: {path}: {msg}")]
    Load { path: PathBuf, msg: String },
    /// Loss became NaN or infinite during optimisation.
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, value: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, SegError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SegError::Shape(msg.into()))
}

pub(crate) fn domain_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(SegError::Domain(msg.into()))
}
