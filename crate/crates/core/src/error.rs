use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },

    #[error("attention row {row} has no visible positions")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("objective is not finite at leaf {leaf}, coordinate {index} (value {value})")]
    Evaluation {
        leaf: usize,
        index: usize,
        value: f64,
    },

    #[error("value {value} at position {index} is outside the open interval (0, 1)")]
    Domain { index: usize, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("no encoder state available for decoding")]
    NoInput,

    #[error("encoder state {index} read while only {available} states were available")]
    Causality { index: usize, available: usize },

    #[error("token id {id} is outside the vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("invalid target sequence: {0}")]
    Targets(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data generation failed: {0}")]
    Generation(String),

    #[error("corpus latency is undefined: no correctly decoded tokens")]
    UndefinedLatency,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Toml(_) => true,
            Error::Stage { source, .. } => source.is_usage(),
            _ => false,
        }
    }
}
