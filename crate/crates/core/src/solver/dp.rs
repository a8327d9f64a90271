//! Exact MAP inference over valid equations.
//!
//! For each split `(len_a, len_b, len_c)` the operator positions are fixed
//! and the digits are chosen column by column, least significant first. A
//! column picks the digits of `a` and `b` that exist at that column; the
//! carry-in then forces the digit of `c` and the carry-out through
//! `d_a + d_b + carry_in = d_c + 10 · carry_out`. Numbers shorter than the
//! column contribute a fixed 0, and the carry out of the last column must be
//! 0. The DP state after column `j` is the carry plus the digits just chosen
//! for every number that continues into column `j + 1`; those are exactly
//! what the within-number pair scores of the next column need.
//!
//! Each state keeps its best and second-best path values. When the global
//! runner-up is within [`TIE_TOL`] of the optimum, the lexicographically
//! smallest optimal sequence is recovered by fixing positions left to right
//! with constrained re-solves.

use super::chain::ChainScore;
use super::validity::Split;
use crate::symbol::{Symbol, EQUALS, NUM_SYMBOLS, PLUS};
use crate::{ContractError, SolveError};

/// Two scores closer than this are ties.
pub const TIE_TOL: f64 = 1e-9;

/// A maximizing sequence and its chain score.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub sequence: Vec<Symbol>,
    pub score: f64,
}

type Mask = u16;
const ALL: Mask = (1 << NUM_SYMBOLS) - 1;
const STATES: usize = 2000;

#[inline]
fn bit(k: usize) -> Mask {
    1 << k
}

#[inline]
fn state(carry: usize, a: usize, b: usize, c: usize) -> usize {
    ((carry * 10 + a) * 10 + b) * 10 + c
}

#[derive(Clone, Copy, Default)]
struct Back {
    prev: u16,
    da: u8,
    db: u8,
    dc: u8,
}

struct SplitBest {
    best: f64,
    second: f64,
    sequence: Vec<Symbol>,
}

/// Best valid sequence for `chain`, ties resolved to the lexicographically
/// smallest sequence.
pub fn solve_map(chain: &ChainScore, max_digits: usize) -> Result<Solution, SolveError> {
    let m = chain.len();
    let splits = Split::enumerate(m, max_digits);
    if splits.is_empty() {
        return Err(SolveError::Infeasible { len: m, max_digits });
    }
    check_finite(chain)?;

    let all = vec![ALL; m];
    let mut results: Vec<(Split, SplitBest)> = Vec::with_capacity(splits.len());
    for &split in &splits {
        if let Some(r) = solve_split(chain, split, &all, true) {
            results.push((split, r));
        }
    }
    let mut values: Vec<f64> = results.iter().flat_map(|(_, r)| [r.best, r.second]).collect();
    if values.is_empty() {
        return Err(SolveError::Infeasible { len: m, max_digits });
    }
    values.sort_by(|a, b| b.total_cmp(a));
    let optimum = values[0];
    let runner_up = values.get(1).copied().unwrap_or(f64::NEG_INFINITY);

    let sequence = if runner_up >= optimum - TIE_TOL {
        let candidates: Vec<Split> = results.iter().filter(|(_, r)| r.best >= optimum - TIE_TOL).map(|(s, _)| *s).collect();
        lexmin_optimal(chain, &candidates, optimum)
    } else {
        results.into_iter().find(|(_, r)| r.best == optimum).map(|(_, r)| r.sequence).expect("optimum comes from a split")
    };
    let score = chain.evaluate(&sequence);
    Ok(Solution { sequence, score })
}

fn check_finite(chain: &ChainScore) -> Result<(), ContractError> {
    let ok = chain.constant.is_finite()
        && chain.unary.iter().flatten().all(|v| v.is_finite())
        && chain.pairwise.iter().flatten().all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(ContractError::NonFinite("chain score"))
    }
}

/// Fixes positions left to right to the smallest symbol that still admits a
/// completion scoring within the tie tolerance of `optimum`.
fn lexmin_optimal(chain: &ChainScore, splits: &[Split], optimum: f64) -> Vec<Symbol> {
    let m = chain.len();
    let mut allowed = vec![ALL; m];
    for p in 0..m {
        let before = allowed[p];
        let mut fixed = false;
        for k in 0..NUM_SYMBOLS {
            if before & bit(k) == 0 {
                continue;
            }
            allowed[p] = bit(k);
            let best =
                splits.iter().filter_map(|&s| solve_split(chain, s, &allowed, false)).map(|r| r.best).fold(f64::NEG_INFINITY, f64::max);
            if best >= optimum - TIE_TOL {
                fixed = true;
                break;
            }
        }
        assert!(fixed, "optimal path disappeared under prefix constraints");
    }
    allowed.iter().map(|mask| Symbol::new(mask.trailing_zeros() as u8).expect("single-bit mask")).collect()
}

fn digit_choices(present: bool, mask: Mask) -> Vec<usize> {
    if present {
        (0..10).filter(|&d| mask & bit(d) != 0).collect()
    } else {
        vec![0]
    }
}

/// Carry DP for one split under per-position symbol masks.
fn solve_split(chain: &ChainScore, split: Split, allowed: &[Mask], second_best: bool) -> Option<SplitBest> {
    let Split { len_a: la, len_b: lb, len_c: lc } = split;
    let (plus, eq) = (PLUS as usize, EQUALS as usize);
    let (pp, pe) = (split.plus_pos(), split.equals_pos());
    if allowed[pp] & bit(plus) == 0 || allowed[pe] & bit(eq) == 0 {
        return None;
    }
    let u = &chain.unary;
    let pw = &chain.pairwise;
    let cols = la.max(lb).max(lc);

    let mut v1 = vec![f64::NEG_INFINITY; STATES];
    let mut v2 = vec![f64::NEG_INFINITY; STATES];
    v1[0] = chain.constant + u[pp][plus] + u[pe][eq];
    let mut backs: Vec<Vec<Back>> = Vec::with_capacity(cols);

    for j in 0..cols {
        let a_digits = digit_choices(j < la, if j < la { allowed[split.pos_a(j)] } else { ALL });
        let b_digits = digit_choices(j < lb, if j < lb { allowed[split.pos_b(j)] } else { ALL });
        let c_mask = if j < lc { allowed[split.pos_c(j)] } else { ALL };
        let last = j + 1 == cols;

        let mut n1 = vec![f64::NEG_INFINITY; STATES];
        let mut n2 = vec![f64::NEG_INFINITY; STATES];
        let mut back = vec![Back::default(); STATES];

        for s in 0..STATES {
            let prev1 = v1[s];
            if prev1 == f64::NEG_INFINITY {
                continue;
            }
            let prev2 = v2[s];
            let (cin, pa, pb, pc) = (s / 1000, (s / 100) % 10, (s / 10) % 10, s % 10);
            for &da in &a_digits {
                for &db in &b_digits {
                    let t = da + db + cin;
                    let (dc, cout) = if j < lc {
                        (t % 10, t / 10)
                    } else if t % 10 == 0 {
                        (0, t / 10)
                    } else {
                        continue;
                    };
                    if (j < lc && c_mask & bit(dc) == 0) || (last && cout != 0) {
                        continue;
                    }

                    let mut gain = 0.0;
                    if j < la {
                        gain += u[split.pos_a(j)][da];
                        gain += if j == 0 { pw[da][plus] } else { pw[da][pa] };
                    }
                    if j < lb {
                        gain += u[split.pos_b(j)][db];
                        gain += if j == 0 { pw[db][eq] } else { pw[db][pb] };
                        if j + 1 == lb {
                            gain += pw[plus][db];
                        }
                    }
                    if j < lc {
                        gain += u[split.pos_c(j)][dc];
                        if j > 0 {
                            gain += pw[dc][pc];
                        }
                        if j + 1 == lc {
                            gain += pw[eq][dc];
                        }
                    }

                    let next =
                        state(cout, if j + 1 < la { da } else { 0 }, if j + 1 < lb { db } else { 0 }, if j + 1 < lc { dc } else { 0 });
                    let c1 = prev1 + gain;
                    if c1 > n1[next] {
                        n2[next] = n1[next];
                        n1[next] = c1;
                        back[next] = Back { prev: s as u16, da: da as u8, db: db as u8, dc: dc as u8 };
                    } else if c1 > n2[next] {
                        n2[next] = c1;
                    }
                    if second_best {
                        // prev2 + gain <= c1 <= n1[next], so only the runner-up can move.
                        let c2 = prev2 + gain;
                        if c2 > n2[next] {
                            n2[next] = c2;
                        }
                    }
                }
            }
        }
        v1 = n1;
        v2 = n2;
        backs.push(back);
    }

    // After the last column no number continues and the carry is 0.
    if v1[0] == f64::NEG_INFINITY {
        return None;
    }
    let mut seq = vec![Symbol::PLUS; split.seq_len()];
    seq[pe] = Symbol::EQUALS;
    let mut s = 0usize;
    for j in (0..cols).rev() {
        let b = backs[j][s];
        if j < la {
            seq[split.pos_a(j)] = Symbol::digit(b.da);
        }
        if j < lb {
            seq[split.pos_b(j)] = Symbol::digit(b.db);
        }
        if j < lc {
            seq[split.pos_c(j)] = Symbol::digit(b.dc);
        }
        s = b.prev as usize;
    }
    Some(SplitBest { best: v1[0], second: v2[0], sequence: seq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::validity::{validate_with, Validity};
    use crate::symbol::{format_symbols, parse_symbols};

    fn one_hot_chain(target: &str, weight: f64) -> ChainScore {
        let y = parse_symbols(target).unwrap();
        let mut chain = ChainScore::zeros(y.len());
        for (e, s) in y.iter().enumerate() {
            chain.unary[e][s.index()] = weight;
        }
        chain
    }

    #[test]
    fn dominant_valid_target_is_returned() {
        let sol = solve_map(&one_hot_chain("1+1=2", 1000.0), 3).unwrap();
        assert_eq!(format_symbols(&sol.sequence), "1+1=2");
        assert_eq!(sol.score, 5000.0);
    }

    #[test]
    fn all_zero_chain_breaks_ties_lexicographically() {
        let sol = solve_map(&ChainScore::zeros(5), 3).unwrap();
        assert_eq!(format_symbols(&sol.sequence), "0+0=0");
        for m in 5..=8 {
            let chain = ChainScore::zeros(m);
            let oracle = crate::solver::brute_force_map(&chain, 2).unwrap();
            assert_eq!(solve_map(&chain, 2).unwrap(), oracle);
        }
    }

    #[test]
    fn invalid_target_is_corrected() {
        let sol = solve_map(&one_hot_chain("1+1=3", 10.0), 3).unwrap();
        assert_eq!(validate_with(&sol.sequence, 3), Validity::Valid);
        assert_ne!(format_symbols(&sol.sequence), "1+1=3");
    }

    #[test]
    fn carries_propagate_across_columns() {
        let sol = solve_map(&one_hot_chain("95+7=102", 1.0), 3).unwrap();
        assert_eq!(format_symbols(&sol.sequence), "95+7=102");
        let sol = solve_map(&one_hot_chain("007+2=9", 1.0), 3).unwrap();
        assert_eq!(format_symbols(&sol.sequence), "007+2=9");
    }

    #[test]
    fn out_of_range_lengths_are_infeasible() {
        assert!(matches!(solve_map(&ChainScore::zeros(4), 3), Err(SolveError::Infeasible { len: 4, .. })));
        assert!(matches!(solve_map(&ChainScore::zeros(12), 3), Err(SolveError::Infeasible { len: 12, .. })));
        assert!(matches!(solve_map(&ChainScore::zeros(9), 2), Err(SolveError::Infeasible { .. })));
    }

    #[test]
    fn non_finite_chain_is_rejected() {
        let mut chain = ChainScore::zeros(5);
        chain.unary[2][3] = f64::NAN;
        assert!(matches!(solve_map(&chain, 3), Err(SolveError::Contract(ContractError::NonFinite(_)))));
    }

    #[test]
    fn pairwise_scores_shape_the_optimum() {
        // Only transitions matter: reward "9" after "+" and "9" before "=".
        let mut chain = ChainScore::zeros(5);
        chain.pairwise[PLUS as usize][9] = 5.0;
        chain.pairwise[9][EQUALS as usize] = 5.0;
        let sol = solve_map(&chain, 3).unwrap();
        assert_eq!(format_symbols(&sol.sequence), "0+9=9");
        assert_eq!(sol.score, 10.0);
    }
}
