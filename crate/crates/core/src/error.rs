use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by corpus loading, preprocessing, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("length mismatch: {0} vs {1} frames")]
    LengthMismatch(usize, usize),

    #[error("modality layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("rank deficient: requested {requested} components but only {available} eigenvalues exceed the floor")]
    RankDeficient { requested: usize, available: usize },

    #[error("no word label has two or more tokens; cannot sample same-word pairs")]
    NoSamePairsAvailable,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    DivergedLoss { epoch: usize, batch: usize },

    #[error("missing embedding for utterance {0}")]
    MissingEmbedding(String),

    #[error("insufficient vectors: {0}")]
    InsufficientVectors(String),

    #[error("no held-out tokens of phone {0}")]
    NoHeldOutTokens(String),

    #[error("infeasible synthetic configuration: {0}")]
    ConfigInfeasible(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("bad feature file {}: {reason}", path.display())]
    BadFeatureFile { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    ///
    /// 1 = usage/configuration, 2 = data, 3 = numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::ConfigInfeasible(_) => 1,
            Error::RankDeficient { .. } | Error::DivergedLoss { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
