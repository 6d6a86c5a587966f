use thiserror::Error;

use crate::volume::Dims;

#[derive(Debug, Error)]
pub enum RegError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: Dims, right: Dims },

    #[error("data length {found} does not match dims {dims} (expected {expected})")]
    BadLength {
        dims: Dims,
        expected: usize,
        found: usize,
    },

    #[error("volume dims {dims} too small: every axis needs at least {min} voxels")]
    TooSmall { dims: Dims, min: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("no z-slice contains both masks for label {0}")]
    NoCommonSlice(u16),

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported file version {0}")]
    BadVersion(u32),

    #[error("unknown volume kind {0}")]
    BadKind(u8),

    #[error("expected a {expected} volume, found {found}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RegError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        RegError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, RegError>;
