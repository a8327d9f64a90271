//! Handwritten equation recognition with a per-glyph CNN whose raw
//! predictions are refined by a learned structured predictor that only ever
//! outputs valid `a+b=c` equations.

pub mod checkpoint;
pub mod config;
pub mod dataset;
mod error;
pub mod experiment;
pub mod features;
pub mod glyph;
pub mod gradcheck;
pub mod nn;
pub mod solver;
pub mod symbol;
pub mod training;

pub use error::{CheckpointError, ContractError, DatasetError, Error, NnError, Result, SolveError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
