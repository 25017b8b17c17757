use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("metagraph `{0}` contains a cycle")]
    Cycle(String),

    #[error("metagraph `{name}` must have exactly one source and one sink (found {sources} sources, {sinks} sinks)")]
    SourceSink { name: String, sources: usize, sinks: usize },

    #[error("parallel block branches disagree on endpoint type: `{expected}` vs `{found}`")]
    BranchEndpoint { expected: String, found: String },

    #[error("unknown relation `{0}`")]
    UnknownRelation(String),

    #[error("unknown entity type `{0}`")]
    UnknownEntity(String),

    #[error("ambiguous traversal direction for same-type relation `{0}`; mark reverse traversal with `~`")]
    AmbiguousDirection(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("metagraph `{0}` is not series-parallel and cannot be compiled to matrix products")]
    NotSeriesParallel(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("diverged at iteration {iter}: objective is not finite")]
    Divergence { iter: usize },

    #[error("regularization too strong: all singular values (max {sigma_max:.4e}) fall below the threshold {threshold:.4e}; try mu < {sigma_max:.4e}")]
    Overregularized { sigma_max: f64, threshold: f64 },

    #[error("no metagraphs")]
    NoMetagraphs,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
