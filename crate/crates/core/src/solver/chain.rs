use crate::features::{pixel_index, transition_index, NetworkOutput, StructuredWeights};
use crate::glyph::GlyphImage;
use crate::symbol::{Symbol, NUM_SYMBOLS};
use crate::ContractError;

/// Per-position unary scores and adjacent-pair scores.
///
/// The score of `y` is `constant + Σ_e unary[e][y_e] + Σ_e pairwise[y_e][y_{e+1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainScore {
    pub unary: Vec<[f64; NUM_SYMBOLS]>,
    pub pairwise: [[f64; NUM_SYMBOLS]; NUM_SYMBOLS],
    pub constant: f64,
}

impl ChainScore {
    pub fn zeros(m: usize) -> ChainScore {
        ChainScore { unary: vec![[0.0; NUM_SYMBOLS]; m], pairwise: [[0.0; NUM_SYMBOLS]; NUM_SYMBOLS], constant: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.unary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unary.is_empty()
    }

    /// Score of `y`.
    ///
    /// # Panics
    /// Panics when `y.len()` differs from the chain length.
    pub fn evaluate(&self, y: &[Symbol]) -> f64 {
        assert_eq!(y.len(), self.len(), "sequence length does not match chain");
        let unary: f64 = y.iter().enumerate().map(|(e, s)| self.unary[e][s.index()]).sum();
        let pairwise: f64 = y.windows(2).map(|w| self.pairwise[w[0].index()][w[1].index()]).sum();
        self.constant + unary + pairwise
    }
}

/// Compiles the refinement objective for one input into a chain.
///
/// With `gold` present the Hamming loss `[k ≠ gold_e]` is added to every
/// unary entry, turning MAP inference into loss-augmented inference.
pub fn compile_chain(
    weights: &StructuredWeights,
    x: &[GlyphImage],
    output: &NetworkOutput,
    gold: Option<&[Symbol]>,
) -> Result<ChainScore, ContractError> {
    let m = x.len();
    if m == 0 {
        return Err(ContractError::Empty);
    }
    output.check(m)?;
    if let Some(g) = gold {
        if g.len() != m {
            return Err(ContractError::LengthMismatch { expected: m, found: g.len() });
        }
    }
    let mut chain = ChainScore::zeros(m);
    for (e, img) in x.iter().enumerate() {
        let mut emission = [0.0; NUM_SYMBOLS];
        let mut refinement = [0.0; NUM_SYMBOLS];
        for p in img.on_pixels() {
            let base = pixel_index(p, 0);
            for k in 0..NUM_SYMBOLS {
                emission[k] += weights.emission[base + k];
                refinement[k] += weights.refinement[base + k];
            }
        }
        for (k, u) in chain.unary[e].iter_mut().enumerate() {
            let d = output.disagreement(e, k);
            *u = emission[k] + (refinement[k] + weights.delta) * d;
            if let Some(g) = gold {
                if g[e].index() != k {
                    *u += 1.0;
                }
            }
        }
    }
    for k1 in 0..NUM_SYMBOLS {
        for k2 in 0..NUM_SYMBOLS {
            chain.pairwise[k1][k2] = weights.transition[transition_index(k1, k2)];
        }
    }
    Ok(chain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::parse_symbols;

    #[test]
    fn zero_weights_give_zero_chain() {
        let x = vec![crate::glyph::template(Symbol::digit(1)); 5];
        let out = NetworkOutput::Hard(parse_symbols("1+1=2").unwrap());
        let chain = compile_chain(&StructuredWeights::zeros(), &x, &out, None).unwrap();
        assert_eq!(chain, ChainScore::zeros(5));
    }

    #[test]
    fn gold_adds_pure_hamming_augmentation() {
        let x = vec![crate::glyph::template(Symbol::digit(1)); 5];
        let gold = parse_symbols("1+1=2").unwrap();
        let out = NetworkOutput::Hard(gold.clone());
        let chain = compile_chain(&StructuredWeights::zeros(), &x, &out, Some(&gold)).unwrap();
        for (e, row) in chain.unary.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                assert_eq!(v, (gold[e].index() != k) as u8 as f64);
            }
        }
    }
}
