use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backbone::ImportError;
use crate::data::DataError;
use crate::loss::LossError;
use crate::retrieval::EvalError;
use crate::tensor::mft::MftError;
use crate::tensor::TensorError;

/// Errors surfaced by the pipeline commands.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mft(#[from] MftError),
    #[error(transparent)]
    Import(#[from] ImportError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// True for failures of the filesystem or of user input rather than of a
    /// computation.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Json(_) | Error::Checkpoint(_) => true,
            Error::Mft(_) | Error::Import(_) => true,
            Error::Data(d) => matches!(
                d,
                DataError::Io { .. }
                    | DataError::Json(_)
                    | DataError::Manifest(_)
                    | DataError::Mft(_)
                    | DataError::TooFewClasses(_)
                    | DataError::NoDrones
                    | DataError::PadTooWide { .. }
            ),
            Error::Eval(e) => matches!(e, EvalError::Io { .. } | EvalError::Mft(_) | EvalError::Json(_)),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
