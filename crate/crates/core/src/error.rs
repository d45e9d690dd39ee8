use std::path::PathBuf;

use thiserror::Error;

use crate::plan::Region;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed VOL1/CKPT1 stream; `offset` is the byte position of the
    /// first invalid content.
    #[error("{path}: format error at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Patch assembly received jobs that do not cover the working volume.
    #[error("assembly coverage error: no job owns {0}")]
    Uncovered(Region),

    /// Patch assembly received jobs whose paste regions overlap.
    #[error("assembly coverage error: voxel ({0}, {1}, {2}) written more than once")]
    DoubleWrite(i64, i64, i64),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}; recent (step, loss_d, loss_g): {history:?}")]
    NanLoss {
        step: usize,
        history: Vec<(usize, f64, f64)>,
    },

    /// An operation that needs intensity spread got a constant input.
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            reason: reason.into(),
        }
    }
}
