use std::io;

use thiserror::Error;

/// Dataset generation and dataset file errors.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid symbol id {0} (expected 0..=11)")]
    InvalidSymbol(u8),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported dataset version: {0}")]
    Version(String),
    #[error("sample {index}: {msg}")]
    Validation { index: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Errors from the section-based checkpoint formats.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("expected header `{expected}`, found `{found}`")]
    Version { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Broken caller contracts: mismatched lengths, malformed probability rows.
#[derive(Debug, Error, PartialEq)]
pub enum ContractError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("empty sequence")]
    Empty,
    #[error("probability row {row} sums to {sum}")]
    RowNotNormalized { row: usize, sum: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// Neural network numeric failures.
#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value in layer `{layer}`")]
    NonFinite { layer: &'static str },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: &'static str },
    #[error(transparent)]
    Contract(#[from] ContractError),
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("no valid equation of length {len} with at most {max_digits} digits per number")]
    Infeasible { len: usize, max_digits: usize },
    #[error("search space of ~{estimate} sequences exceeds the cap of {cap}")]
    SearchTooLarge { estimate: u64, cap: u64 },
    #[error(transparent)]
    Contract(#[from] ContractError),
}

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Contract(#[from] ContractError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
