use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("homophily ratio is undefined for a graph without edges")]
    UndefinedRatio,

    #[error("cannot split: {0}")]
    Split(String),

    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("dense problem too large: n = {n} exceeds the limit of {limit} nodes")]
    TooLarge { n: usize, limit: usize },

    #[error("degenerate affinity: degree of row {row} is {degree:e}")]
    Degeneracy { row: usize, degree: f64 },

    #[error("projected row {row} has zero norm")]
    Norm { row: usize },

    #[error("loss mask selects no nodes")]
    EmptyMask,

    #[error("non-finite values in {0}")]
    Numerics(String),

    #[error("forward trace is missing {0}")]
    Trace(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("run with seed {seed} failed: {source}")]
    Run {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
