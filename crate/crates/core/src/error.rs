use std::path::PathBuf;

use thiserror::Error;

use crate::episode::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: episode `{id}` is invalid: {}", fmt_violations(.violations))]
    InvalidEpisode {
        line: usize,
        id: String,
        violations: Vec<Violation>,
    },

    #[error("{path}: file contains no episodes")]
    EmptyFile { path: PathBuf },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("line {line}: dimension {found} differs from dataset dimension {expected}")]
    DatasetDimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate episode id `{0}`")]
    DuplicateId(String),

    #[error("need at least {needed} {what}, got {found}")]
    TooFew {
        what: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(&'static str),

    #[error("svm solver did not converge in {iterations} iterations (max violation {violation:e})")]
    SvmNotConverged { iterations: usize, violation: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("concept pool `{split}` has {pool} concepts, too few for {episodes} episodes (max {reuse} episodes per concept)")]
    PoolTooSmall {
        split: String,
        pool: usize,
        episodes: usize,
        reuse: usize,
    },

    #[error("config: {0}")]
    Config(String),
}

fn fmt_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}
