use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} at row {row}: {message}")]
    Parse {
        file: String,
        row: usize,
        message: String,
    },

    #[error("unknown region {0}")]
    UnknownRegion(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("observation sampling produced no observed edges (scenario {scenario}, seed {seed}); re-seed or raise the ratio")]
    EmptyObservation { scenario: String, seed: u64 },

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("feature schema mismatch, missing features: {missing:?}")]
    SchemaMismatch { missing: Vec<String> },

    #[error("rank-deficient design, collinear columns: {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("unattainable segregation target {target:.3}; best achieved {best:.3}")]
    UnattainableSi { target: f64, best: f64 },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
