use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameters, inconsistent layer chain, unknown keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside an operation's mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("layer {layer}: expected input shape {expected:?}, got {actual:?}")]
    Shape {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("cannot ingest {}: {message}", path.display())]
    Ingest { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} on bag {bag_id}: loss = {loss}")]
    Divergence { epoch: usize, bag_id: u64, loss: f64 },

    #[error("fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("finite-difference oracle error: {0}")]
    Oracle(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
