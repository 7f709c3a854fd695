// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::FacetId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("unknown facet {name:?}")]
    UnknownFacet { name: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("facet {facet} has {count} item(s), need at least {required}")]
    InsufficientItems {
        facet: FacetId,
        count: usize,
        required: usize,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("{what}: expected dimension {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("{0} trailing byte(s) after payload")]
    TrailingBytes(u64),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("layer {layer} out of range for a model with {n_layers} layer(s)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("client error: {0}")]
    Client(String),

    #[error("client request timed out")]
    Timeout,

    #[error("giving up after {attempts} attempt(s): {last}")]
    RetriesExhausted { attempts: usize, last: Box<Error> },

    #[error("evaluation failed at alpha={alpha}: {source}")]
    Sweep {
        alpha: f64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }
}
