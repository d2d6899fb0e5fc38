use std::path::PathBuf;

use crate::curve::MmParams;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Compute,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed point-cloud header: {field}: {message}")]
    Header { field: String, message: String },

    #[error("point {index}: non-finite or invalid attribute `{field}`")]
    InvalidPoint { index: usize, field: &'static str },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("image too small for windowed metric: {width}x{height} (min side {min})")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("curve fit did not converge: {message}")]
    FitFailed { message: String, best: Box<(MmParams, MmParams)> },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),

    #[error("table output error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn header(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Header { field: field.into(), message: message.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Image(_) | Error::Csv(_) => ErrorClass::Io,
            Error::Config(_) => ErrorClass::Config,
            Error::Header { .. } | Error::InvalidPoint { .. } | Error::Json(_) => ErrorClass::Io,
            Error::Invalid(_)
            | Error::DimensionMismatch(..)
            | Error::ImageTooSmall { .. }
            | Error::Degenerate(_)
            | Error::FitFailed { .. } => ErrorClass::Compute,
        }
    }
}
