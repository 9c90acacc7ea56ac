//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors/images that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// A scalar argument is outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A kernel, window or crop does not fit the data it is applied to.
    #[error("size error: {0}")]
    Size(String),
    /// Invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A stage callable violated its shape-preservation contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// Malformed or non-finite data.
    #[error("data error: {0}")]
    Data(String),
    /// Checkpoint/manifest container problems (bad magic, version, layout).
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
