use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("coordinate space mismatch: expected {expected:?}, got {actual:?}")]
    Space {
        expected: crate::keypoints::Space,
        actual: crate::keypoints::Space,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Empty(&'static str),

    #[error("frame {index}: {source}")]
    Render {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True when the failure stems from bad user input (missing or malformed
    /// files, invalid arguments) rather than a failure during computation.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == io::ErrorKind::NotFound,
            Error::Format { .. }
            | Error::Shape { .. }
            | Error::Space { .. }
            | Error::Invalid(_)
            | Error::Empty(_)
            | Error::Json(_) => true,
            Error::NonFinite(_) | Error::Render { .. } | Error::Image(_) => false,
        }
    }
}
