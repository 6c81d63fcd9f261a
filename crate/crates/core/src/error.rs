use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("spec error: {0}")]
    Spec(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("non-finite {term} at epoch {epoch}, step {step} (cls={cls}, cont={cont}, div={div})")]
    NonFinite {
        term: &'static str,
        epoch: usize,
        step: usize,
        cls: f64,
        cont: f64,
        div: f64,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied input or configuration,
    /// as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::Config(_)
                | Error::Shape(_)
                | Error::Lookup(_)
                | Error::Spec(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
