//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor ops, quantizers, loaders, and the trainer.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors could not be combined because their shapes conflict.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A numeric precondition was violated (nonpositive scale, NaN input, ...).
    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// An API contract was violated (non-scalar loss, missing gradient, ...).
    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    /// A binary file did not match its expected layout.
    #[error("format error in {path} at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// A run configuration was inconsistent or referenced unknown names.
    #[error("config error: {msg}")]
    Config { msg: String },

    /// Training aborted because the loss became NaN.
    #[error("training aborted at step {step}: first NaN observed in tensor `{tensor}`")]
    NanLoss { step: usize, tensor: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config { msg: msg.into() }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
