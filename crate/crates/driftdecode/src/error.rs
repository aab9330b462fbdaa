//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate signal: all-zero input has no defined power scale")]
    DegenerateSignal,

    #[error("deep fade: |h| = {h_abs:.3e} is below the floor {floor:.3e}")]
    DeepFade { h_abs: f64, floor: f64 },

    #[error("invalid argument for {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("degenerate weights: a joint-weight row summed to zero")]
    DegenerateWeights,

    #[error("instance too large for the oracle: K = {k}, C = {c} (limits K \u{2264} {k_max}, C \u{2264} {c_max})")]
    OracleLimit { k: usize, c: usize, k_max: usize, c_max: usize },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("layer {0} not found")]
    LayerNotFound(String),

    #[error("unknown config key: {0}")]
    UnknownConfigKey(String),

    #[error("invalid config value for {key}: {detail}")]
    ConfigValue { key: String, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint is incompatible: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode failed for {path}: {detail}")]
    ImageDecode { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format { offset, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
