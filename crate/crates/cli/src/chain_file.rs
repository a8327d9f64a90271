//! CSV block format of `nester solve --chain FILE`.
//!
//! ```text
//! [unary]
//! 0.1,0,0,0,0,0,0,0,0,0,0,0     # one row of 12 per position
//! ...
//! [pairwise]
//! ...                            # 12 rows of 12, optional (zeros)
//! [constant]
//! 0.5                            # optional (zero)
//! ```

use nester::solver::ChainScore;
use nester::symbol::NUM_SYMBOLS;
use nester::{Error, Result};

#[derive(Clone, Copy, PartialEq)]
enum Block {
    None,
    Unary,
    Pairwise,
    Constant,
}

pub fn parse_chain(text: &str) -> Result<ChainScore> {
    let mut block = Block::None;
    let mut unary = Vec::new();
    let mut pairwise = Vec::new();
    let mut constant = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config(format!("chain line {}: {msg}", i + 1));
        block = match line {
            "[unary]" => Block::Unary,
            "[pairwise]" => Block::Pairwise,
            "[constant]" => Block::Constant,
            _ => {
                let values = line
                    .split(',')
                    .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| err(format!("expected finite numbers, found `{line}`")))?;
                match block {
                    Block::None => return Err(err("value outside a block".into())),
                    Block::Unary | Block::Pairwise => {
                        let row: [f64; NUM_SYMBOLS] =
                            values.try_into().map_err(|v: Vec<f64>| err(format!("expected {NUM_SYMBOLS} values, found {}", v.len())))?;
                        if block == Block::Unary {
                            unary.push(row)
                        } else {
                            pairwise.push(row)
                        }
                    }
                    Block::Constant => {
                        if constant.is_some() || values.len() != 1 {
                            return Err(err("the constant block holds a single value".into()));
                        }
                        constant = Some(values[0]);
                    }
                }
                block
            }
        };
    }
    if unary.is_empty() {
        return Err(Error::Config("chain has no [unary] rows".into()));
    }
    let mut chain = ChainScore::zeros(unary.len());
    chain.unary = unary;
    match pairwise.len() {
        0 => {}
        NUM_SYMBOLS => chain.pairwise.copy_from_slice(&pairwise),
        n => return Err(Error::Config(format!("[pairwise] needs {NUM_SYMBOLS} rows, found {n}"))),
    }
    chain.constant = constant.unwrap_or(0.0);
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(hot: usize, v: f64) -> String {
        (0..NUM_SYMBOLS).map(|k| if k == hot { v.to_string() } else { "0".into() }).collect::<Vec<_>>().join(",")
    }

    #[test]
    fn parses_all_blocks() {
        let mut text = format!("[unary]\n{}\n{}\n[pairwise]\n", row(1, 2.0), row(10, -1.5));
        for k in 0..NUM_SYMBOLS {
            text.push_str(&row(k, k as f64));
            text.push('\n');
        }
        text.push_str("[constant]\n0.25\n");
        let chain = parse_chain(&text).unwrap();
        assert_eq!(chain.len(), 2);
        assert_eq!(chain.unary[1][10], -1.5);
        assert_eq!(chain.pairwise[3][3], 3.0);
        assert_eq!(chain.constant, 0.25);
    }

    #[test]
    fn pairwise_and_constant_default_to_zero() {
        let chain = parse_chain(&format!("[unary]\n{}\n", row(0, 1.0))).unwrap();
        assert_eq!(chain.pairwise, [[0.0; NUM_SYMBOLS]; NUM_SYMBOLS]);
        assert_eq!(chain.constant, 0.0);
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_chain("").is_err());
        assert!(parse_chain("1,2,3\n").is_err());
        assert!(parse_chain("[unary]\n1,2,3\n").is_err());
        assert!(parse_chain(&format!("[unary]\n{}\n[pairwise]\n{}\n", row(0, 1.0), row(0, 1.0))).is_err());
        assert!(parse_chain(&format!("[unary]\n{}\n[constant]\n1\n2\n", row(0, 1.0))).is_err());
        assert!(parse_chain(&format!("[unary]\n{}\n", row(0, f64::NAN))).is_err());
    }
}
