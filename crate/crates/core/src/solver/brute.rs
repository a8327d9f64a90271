//! Exhaustive enumeration of valid equations; the reference the DP is checked against.

use super::chain::ChainScore;
use super::dp::{Solution, TIE_TOL};
use super::validity::Split;
use crate::symbol::Symbol;
use crate::SolveError;

/// Default ceiling on the number of enumerated `(a, b)` pairs.
pub const DEFAULT_CAP: u64 = 2_000_000;

/// Brute-force argmax with the default cap.
pub fn brute_force_map(chain: &ChainScore, max_digits: usize) -> Result<Solution, SolveError> {
    brute_force_map_capped(chain, max_digits, DEFAULT_CAP)
}

/// Enumerates every valid sequence of the chain's length. Refuses when the
/// number of candidate `(a, b)` pairs exceeds `cap`.
pub fn brute_force_map_capped(chain: &ChainScore, max_digits: usize, cap: u64) -> Result<Solution, SolveError> {
    let m = chain.len();
    let splits = Split::enumerate(m, max_digits);
    if splits.is_empty() {
        return Err(SolveError::Infeasible { len: m, max_digits });
    }
    let estimate: u64 = splits.iter().map(|s| 10u64.pow((s.len_a + s.len_b) as u32)).sum();
    if estimate > cap {
        return Err(SolveError::SearchTooLarge { estimate, cap });
    }

    let mut optimum = f64::NEG_INFINITY;
    for_each_valid(&splits, |y| optimum = optimum.max(chain.evaluate(y)));
    if optimum == f64::NEG_INFINITY {
        return Err(SolveError::Infeasible { len: m, max_digits });
    }
    let mut best: Option<Vec<Symbol>> = None;
    for_each_valid(&splits, |y| {
        if chain.evaluate(y) >= optimum - TIE_TOL && best.as_deref().is_none_or(|b| y < b) {
            best = Some(y.to_vec());
        }
    });
    let sequence = best.expect("optimum is attained");
    let score = chain.evaluate(&sequence);
    Ok(Solution { sequence, score })
}

/// Calls `f` on every valid sequence (leading zeros allowed) of the given splits.
pub fn for_each_valid(splits: &[Split], mut f: impl FnMut(&[Symbol])) {
    let mut y = Vec::new();
    for s in splits {
        let (ha, hb, hc) = (10u64.pow(s.len_a as u32), 10u64.pow(s.len_b as u32), 10u64.pow(s.len_c as u32));
        for a in 0..ha {
            for b in 0..hb {
                let c = a + b;
                if c >= hc {
                    continue;
                }
                y.clear();
                push_digits(&mut y, a, s.len_a);
                y.push(Symbol::PLUS);
                push_digits(&mut y, b, s.len_b);
                y.push(Symbol::EQUALS);
                push_digits(&mut y, c, s.len_c);
                f(&y);
            }
        }
    }
}

fn push_digits(y: &mut Vec<Symbol>, n: u64, len: usize) {
    for k in (0..len).rev() {
        y.push(Symbol::digit(((n / 10u64.pow(k as u32)) % 10) as u8));
    }
}
