//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("ragged rows: row {row} has length {got}, expected {expected}")]
    RaggedRows {
        row: usize,
        got: usize,
        expected: usize,
    },

    #[error("fewer than 2 distinct labels (found {0})")]
    TooFewLabels(usize),

    #[error("mismatched series length: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("series too short: T={t} cannot satisfy crop constraints (min_overlap={min_overlap})")]
    SeriesTooShort { t: usize, min_overlap: usize },

    #[error("overlap region too small: |Omega|={0}, need at least 2")]
    OverlapTooSmall(usize),

    #[error("batch too small: {0}, need at least 2")]
    BatchTooSmall(usize),

    #[error("empty cluster {0}")]
    EmptyCluster(usize),

    #[error("need at least as many samples as clusters: N={n} < K={k}")]
    TooFewSamples { n: usize, k: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown variant: {0}")]
    UnknownVariant(String),
}
