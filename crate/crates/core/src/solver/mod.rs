//! Constrained inference over valid `a+b=c` equations.
//!
//! The refinement objective decomposes into per-position and adjacent-pair
//! terms, so every inference problem is first compiled into a [`ChainScore`]
//! and then maximized over the valid set by [`solve_map`]. [`brute_force_map`]
//! enumerates the same set and serves as the reference implementation.

mod brute;
mod chain;
mod dp;
mod validity;

pub use brute::{brute_force_map, brute_force_map_capped, for_each_valid, DEFAULT_CAP};
pub use chain::{compile_chain, ChainScore};
pub use dp::{solve_map, Solution, TIE_TOL};
pub use validity::{
    decode_numbers, decode_numbers_with, parse_split, validate, validate_with, Segment, Split, SyntaxViolation, Validity, MAX_DIGITS,
};

use crate::features::{NetworkOutput, StructuredWeights};
use crate::glyph::GlyphImage;
use crate::symbol::Symbol;
use crate::SolveError;

/// Most violating valid output: `argmax_y Δ(gold, y) + score(y)`.
///
/// The returned [`Solution::score`] is the augmented score.
pub fn solve_loss_augmented(
    weights: &StructuredWeights,
    x: &[GlyphImage],
    output: &NetworkOutput,
    gold: &[Symbol],
    max_digits: usize,
) -> Result<Solution, SolveError> {
    let chain = compile_chain(weights, x, output, Some(gold))?;
    solve_map(&chain, max_digits)
}

/// Constrained prediction: the best valid output under `weights`.
pub fn predict(weights: &StructuredWeights, x: &[GlyphImage], output: &NetworkOutput, max_digits: usize) -> Result<Solution, SolveError> {
    let chain = compile_chain(weights, x, output, None)?;
    solve_map(&chain, max_digits)
}
