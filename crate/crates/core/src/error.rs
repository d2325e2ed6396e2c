// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform to an operation.
    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A configuration field failed validation.
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A caller-supplied argument is outside its domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A loss or parameter became NaN/Inf.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A checkpoint file is malformed or incompatible.
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlParse(#[from] toml::de::Error),

    #[error(transparent)]
    TomlWrite(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
