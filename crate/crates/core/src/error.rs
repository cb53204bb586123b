use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("{}: bad magic bytes (expected {expected})", path.display())]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{}: truncated payload ({got} bytes, expected {expected})", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        got: usize,
    },

    #[error("{}: manifest declares {manifest:?} but payload has {payload:?}", path.display())]
    DimMismatch {
        path: PathBuf,
        manifest: (usize, usize),
        payload: (usize, usize),
    },

    #[error("{}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad data on disk or bad user input files.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::DimMismatch { .. }
                | Error::Manifest { .. }
                | Error::Config(_)
                | Error::Io { .. }
        )
    }

    /// True for NaN/Inf failures in forward values or gradients.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NonFiniteGradient { .. })
    }
}
