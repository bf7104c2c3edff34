use thiserror::Error;

use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("all {batch} anchors fall in singleton clusters; no negatives available")]
    NoNegatives { batch: usize },

    #[error("conditioning failure in kernel solve (lambda = {lambda:e}): {source}")]
    Conditioning {
        lambda: f64,
        #[source]
        source: NumericsError,
    },

    #[error("group {group} has no samples with label {label}")]
    UndefinedConditional { group: usize, label: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter norms: {norms})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        norms: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
