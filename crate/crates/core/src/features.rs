//! Joint feature maps of the refinement predictor and the score built from them.
//!
//! The score of a candidate output `y` given images `x` and the network's
//! output is
//!
//! ```text
//! score = <w_emission, φ_em(x, y)> + <w_transition, φ_tr(y)>
//!       + <w_refinement, φ_ref(x, ŷ, y)> + w_delta · δ(y, ŷ)
//! ```
//!
//! where `φ_em[p, k]` counts set pixels `p` in images labelled `k`, `φ_tr`
//! counts adjacent symbol pairs, `φ_ref[p, k]` counts set pixels in images
//! labelled `k` where the network did *not* predict `k`, and `δ` is the
//! Hamming distance to the network prediction.
//!
//! For end-to-end training the indicator `[ŷ_e ≠ k]` is relaxed to
//! `1 - P[e][k]` using the network's softmax rows; with one-hot rows the soft
//! quantities coincide with the hard ones exactly.

use crate::checkpoint::{read_sections, take_section, write_sections};
use crate::glyph::{GlyphImage, PIXELS};
use crate::symbol::{Symbol, NUM_SYMBOLS};
use crate::{CheckpointError, ContractError};

/// Length of the emission and refinement blocks (81 pixels × 12 symbols).
pub const PIXEL_BLOCK: usize = PIXELS * NUM_SYMBOLS;

/// Length of the transition block (12 × 12 symbol pairs).
pub const TRANSITION_BLOCK: usize = NUM_SYMBOLS * NUM_SYMBOLS;

/// Total number of structured weights.
pub const DIM: usize = 2 * PIXEL_BLOCK + TRANSITION_BLOCK + 1;

/// One softmax row over the alphabet.
pub type ProbRow = [f64; NUM_SYMBOLS];

/// Tolerance on probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Index of `(pixel, symbol)` in a pixel block.
#[inline]
pub fn pixel_index(pixel: usize, symbol: usize) -> usize {
    pixel * NUM_SYMBOLS + symbol
}

/// Index of `(first, second)` in the transition block.
#[inline]
pub fn transition_index(first: usize, second: usize) -> usize {
    first * NUM_SYMBOLS + second
}

/// What the network hands to the refinement layer.
#[derive(Debug, Clone, PartialEq)]
pub enum NetworkOutput {
    /// Discrete predictions `ŷ`; disagreement is the indicator `[ŷ_e ≠ k]`.
    Hard(Vec<Symbol>),
    /// Softmax rows `P`; disagreement is `1 - P[e][k]`.
    Soft(Vec<ProbRow>),
}

/// How network probabilities enter the refinement and distance terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Relaxation {
    /// Use the argmax prediction (straight-through during fine-tuning).
    Hard,
    /// Use the probabilities themselves.
    #[default]
    Soft,
}

impl NetworkOutput {
    /// Packs softmax rows according to `mode`.
    pub fn from_probs(probs: &[ProbRow], mode: Relaxation) -> NetworkOutput {
        match mode {
            Relaxation::Hard => NetworkOutput::Hard(probs.iter().map(argmax_symbol).collect()),
            Relaxation::Soft => NetworkOutput::Soft(probs.to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NetworkOutput::Hard(y) => y.len(),
            NetworkOutput::Soft(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Disagreement weight of emitting `symbol` at `pos`.
    #[inline]
    pub fn disagreement(&self, pos: usize, symbol: usize) -> f64 {
        match self {
            NetworkOutput::Hard(y) => (y[pos].index() != symbol) as u8 as f64,
            NetworkOutput::Soft(p) => 1.0 - p[pos][symbol],
        }
    }

    /// Argmax predictions; ties go to the smaller id.
    pub fn predictions(&self) -> Vec<Symbol> {
        match self {
            NetworkOutput::Hard(y) => y.clone(),
            NetworkOutput::Soft(p) => p.iter().map(argmax_symbol).collect(),
        }
    }

    pub(crate) fn check(&self, m: usize) -> Result<(), ContractError> {
        check_len(m, self.len())?;
        if let NetworkOutput::Soft(p) = self {
            check_rows(p)?;
        }
        Ok(())
    }
}

/// Argmax of a probability row, ties broken toward the smaller symbol id.
pub fn argmax_symbol(row: &ProbRow) -> Symbol {
    let mut best = 0;
    for k in 1..NUM_SYMBOLS {
        if row[k] > row[best] {
            best = k;
        }
    }
    Symbol::new(best as u8).expect("index below alphabet size")
}

fn check_len(expected: usize, found: usize) -> Result<(), ContractError> {
    if expected != found {
        return Err(ContractError::LengthMismatch { expected, found });
    }
    Ok(())
}

fn check_rows(p: &[ProbRow]) -> Result<(), ContractError> {
    for (row, r) in p.iter().enumerate() {
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || r.iter().any(|v| !v.is_finite()) {
            return Err(ContractError::RowNotNormalized { row, sum });
        }
    }
    Ok(())
}

fn check_pair(x: &[GlyphImage], y: &[Symbol]) -> Result<(), ContractError> {
    if y.is_empty() {
        return Err(ContractError::Empty);
    }
    check_len(y.len(), x.len())
}

/// Emission features: `φ[p, k] = Σ_e x_e[p] · [y_e = k]`.
pub fn emission_features(x: &[GlyphImage], y: &[Symbol]) -> Result<Vec<f64>, ContractError> {
    check_pair(x, y)?;
    let mut phi = vec![0.0; PIXEL_BLOCK];
    for (img, s) in x.iter().zip(y) {
        for p in img.on_pixels() {
            phi[pixel_index(p, s.index())] += 1.0;
        }
    }
    Ok(phi)
}

/// Transition features: counts of each adjacent pair `(y_e, y_{e+1})`.
pub fn transition_features(y: &[Symbol]) -> Vec<f64> {
    let mut phi = vec![0.0; TRANSITION_BLOCK];
    for w in y.windows(2) {
        phi[transition_index(w[0].index(), w[1].index())] += 1.0;
    }
    phi
}

/// Refinement features: `φ[p, k] = Σ_e x_e[p] · [y_e = k ∧ ŷ_e ≠ k]`.
pub fn refinement_features(x: &[GlyphImage], y_hat: &[Symbol], y: &[Symbol]) -> Result<Vec<f64>, ContractError> {
    check_pair(x, y)?;
    check_len(y.len(), y_hat.len())?;
    let mut phi = vec![0.0; PIXEL_BLOCK];
    for ((img, s), h) in x.iter().zip(y).zip(y_hat) {
        if s != h {
            for p in img.on_pixels() {
                phi[pixel_index(p, s.index())] += 1.0;
            }
        }
    }
    Ok(phi)
}

/// Number of positions where the two sequences differ.
pub fn hamming(y: &[Symbol], y_hat: &[Symbol]) -> Result<usize, ContractError> {
    check_len(y.len(), y_hat.len())?;
    Ok(y.iter().zip(y_hat).filter(|(a, b)| a != b).count())
}

/// Refinement features with `[ŷ_e ≠ k]` relaxed to `1 - P[e][k]`.
pub fn soft_refinement_features(x: &[GlyphImage], probs: &[ProbRow], y: &[Symbol]) -> Result<Vec<f64>, ContractError> {
    check_pair(x, y)?;
    check_len(y.len(), probs.len())?;
    check_rows(probs)?;
    let mut phi = vec![0.0; PIXEL_BLOCK];
    for ((img, s), row) in x.iter().zip(y).zip(probs) {
        let d = 1.0 - row[s.index()];
        for p in img.on_pixels() {
            phi[pixel_index(p, s.index())] += d;
        }
    }
    Ok(phi)
}

/// `Σ_e (1 - P[e][y_e])`.
pub fn soft_hamming(y: &[Symbol], probs: &[ProbRow]) -> Result<f64, ContractError> {
    check_len(y.len(), probs.len())?;
    check_rows(probs)?;
    Ok(y.iter().zip(probs).map(|(s, row)| 1.0 - row[s.index()]).sum())
}

/// The four feature blocks of one `(x, network output, y)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeatures {
    pub emission: Vec<f64>,
    pub transition: Vec<f64>,
    pub refinement: Vec<f64>,
    pub delta: f64,
}

impl JointFeatures {
    pub fn compute(x: &[GlyphImage], output: &NetworkOutput, y: &[Symbol]) -> Result<JointFeatures, ContractError> {
        check_pair(x, y)?;
        output.check(y.len())?;
        let emission = emission_features(x, y)?;
        let transition = transition_features(y);
        let (refinement, delta) = match output {
            NetworkOutput::Hard(y_hat) => (refinement_features(x, y_hat, y)?, hamming(y, y_hat)? as f64),
            NetworkOutput::Soft(p) => (soft_refinement_features(x, p, y)?, soft_hamming(y, p)?),
        };
        Ok(JointFeatures { emission, transition, refinement, delta })
    }
}

/// The learnable weights `(w_emission, w_transition, w_refinement, w_delta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredWeights {
    pub emission: Vec<f64>,
    pub transition: Vec<f64>,
    pub refinement: Vec<f64>,
    pub delta: f64,
}

impl Default for StructuredWeights {
    fn default() -> Self {
        Self::zeros()
    }
}

impl StructuredWeights {
    pub fn zeros() -> StructuredWeights {
        StructuredWeights {
            emission: vec![0.0; PIXEL_BLOCK],
            transition: vec![0.0; TRANSITION_BLOCK],
            refinement: vec![0.0; PIXEL_BLOCK],
            delta: 0.0,
        }
    }

    /// Only the distance weight set.
    pub fn distance_only(delta: f64) -> StructuredWeights {
        StructuredWeights { delta, ..Self::zeros() }
    }

    pub fn dot(&self, phi: &JointFeatures) -> f64 {
        dot(&self.emission, &phi.emission)
            + dot(&self.transition, &phi.transition)
            + dot(&self.refinement, &phi.refinement)
            + self.delta * phi.delta
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.emission, &self.emission)
            + dot(&self.transition, &self.transition)
            + dot(&self.refinement, &self.refinement)
            + self.delta * self.delta
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &StructuredWeights) {
        axpy(alpha, &other.emission, &mut self.emission);
        axpy(alpha, &other.transition, &mut self.transition);
        axpy(alpha, &other.refinement, &mut self.refinement);
        self.delta += alpha * other.delta;
    }

    /// `self += alpha * phi`.
    pub fn add_features(&mut self, alpha: f64, phi: &JointFeatures) {
        axpy(alpha, &phi.emission, &mut self.emission);
        axpy(alpha, &phi.transition, &mut self.transition);
        axpy(alpha, &phi.refinement, &mut self.refinement);
        self.delta += alpha * phi.delta;
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.values_mut() {
            *v *= alpha;
        }
    }

    /// All 2089 values in block order: emission, transition, refinement, delta.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.emission.iter().chain(&self.transition).chain(&self.refinement).copied().chain(std::iter::once(self.delta))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.emission.iter_mut().chain(self.transition.iter_mut()).chain(self.refinement.iter_mut()).chain(std::iter::once(&mut self.delta))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

/// Header line of structured-weight checkpoint files.
pub const CST_HEADER: &str = "#nester-cst v1";

impl StructuredWeights {
    pub fn write_to<W: std::io::Write>(&self, w: W) -> Result<(), CheckpointError> {
        let delta = [self.delta];
        write_sections(
            w,
            CST_HEADER,
            &[
                ("emission", &[PIXELS, NUM_SYMBOLS], &self.emission),
                ("transition", &[NUM_SYMBOLS, NUM_SYMBOLS], &self.transition),
                ("refinement", &[PIXELS, NUM_SYMBOLS], &self.refinement),
                ("delta", &[1], &delta),
            ],
        )
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<StructuredWeights, CheckpointError> {
        let mut sections = read_sections(std::io::BufReader::new(r), CST_HEADER)?;
        let emission = take_section(&mut sections, "emission", Some(&[PIXELS, NUM_SYMBOLS]))?.values;
        let transition = take_section(&mut sections, "transition", Some(&[NUM_SYMBOLS, NUM_SYMBOLS]))?.values;
        let refinement = take_section(&mut sections, "refinement", Some(&[PIXELS, NUM_SYMBOLS]))?.values;
        let delta = take_section(&mut sections, "delta", Some(&[1]))?.values[0];
        if let Some(extra) = sections.first() {
            return Err(CheckpointError::Parse { line: 0, msg: format!("unexpected section {}", extra.name) });
        }
        Ok(StructuredWeights { emission, transition, refinement, delta })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), CheckpointError> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<StructuredWeights, CheckpointError> {
        StructuredWeights::read_from(std::fs::File::open(path)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Score of candidate `y` under `weights`.
pub fn nester_score(weights: &StructuredWeights, x: &[GlyphImage], output: &NetworkOutput, y: &[Symbol]) -> Result<f64, ContractError> {
    Ok(weights.dot(&JointFeatures::compute(x, output, y)?))
}

/// Gradient of `score(y)` with respect to the probability rows: the score
/// depends on `P` only through `(1 - P[e][y_e])` in the refinement and
/// distance terms, so the result is `-(R_e(y_e) + w_delta)` at `(e, y_e)`
/// and zero elsewhere, with `R_e(k) = Σ_p x_e[p] · w_refinement[p, k]`.
pub fn score_grad_wrt_probs(weights: &StructuredWeights, x: &[GlyphImage], y: &[Symbol]) -> Result<Vec<ProbRow>, ContractError> {
    check_pair(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(img, s)| {
            let k = s.index();
            let r: f64 = img.on_pixels().map(|p| weights.refinement[pixel_index(p, k)]).sum();
            let mut row = [0.0; NUM_SYMBOLS];
            row[k] = -(r + weights.delta);
            row
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbol::parse_symbols;

    fn seq(s: &str) -> Vec<Symbol> {
        parse_symbols(s).unwrap()
    }

    fn one_pixel(row: usize, col: usize) -> GlyphImage {
        let mut img = GlyphImage::blank();
        img.set(row, col, true);
        img
    }

    fn one_hot(y: &[Symbol]) -> Vec<ProbRow> {
        y.iter()
            .map(|s| {
                let mut r = [0.0; NUM_SYMBOLS];
                r[s.index()] = 1.0;
                r
            })
            .collect()
    }

    #[test]
    fn dimensionality() {
        assert_eq!(DIM, 2089);
        assert_eq!(StructuredWeights::zeros().values().count(), DIM);
    }

    #[test]
    fn emission_examples() {
        let blank = vec![GlyphImage::blank(); 2];
        assert!(emission_features(&blank, &seq("12")).unwrap().iter().all(|&v| v == 0.0));

        let x = vec![one_pixel(0, 0)];
        let phi = emission_features(&x, &seq("5")).unwrap();
        assert_eq!(phi[pixel_index(0, 5)], 1.0);
        assert_eq!(phi.iter().sum::<f64>(), 1.0);

        let img = crate::glyph::template(Symbol::digit(3));
        let single = emission_features(std::slice::from_ref(&img), &seq("3")).unwrap();
        let double = emission_features(&[img.clone(), img], &seq("33")).unwrap();
        assert!(single.iter().zip(&double).all(|(a, b)| 2.0 * a == *b));

        assert_eq!(emission_features(&x, &seq("12")), Err(ContractError::LengthMismatch { expected: 2, found: 1 }));
    }

    #[test]
    fn transition_examples() {
        assert!(transition_features(&seq("7")).iter().all(|&v| v == 0.0));
        let phi = transition_features(&seq("1+1"));
        assert_eq!(phi[transition_index(1, 10)], 1.0);
        assert_eq!(phi[transition_index(10, 1)], 1.0);
        assert_eq!(phi.iter().sum::<f64>(), 2.0);
        let phi = transition_features(&seq("222"));
        assert_eq!(phi[transition_index(2, 2)], 2.0);
    }

    #[test]
    fn refinement_examples() {
        let x: Vec<_> = (0..3).map(|k| crate::glyph::template(Symbol::digit(k))).collect();
        let y = seq("012");
        assert!(refinement_features(&x, &y, &y).unwrap().iter().all(|&v| v == 0.0));

        let x = vec![one_pixel(2, 3)];
        let phi = refinement_features(&x, &seq("7"), &seq("4")).unwrap();
        assert_eq!(phi[pixel_index(2 * 9 + 3, 4)], 1.0);
        assert_eq!(phi.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn refinement_plus_agreement_emission_is_emission() {
        let x: Vec<_> = [1u8, 4, 7, 10].iter().map(|&k| crate::glyph::template(Symbol::new(k).unwrap())).collect();
        let y = seq("14+7");
        let y_hat = seq("11+1");
        let agree: Vec<usize> = (0..4).filter(|&e| y[e] == y_hat[e]).collect();
        let agree_x: Vec<_> = agree.iter().map(|&e| x[e].clone()).collect();
        let agree_y: Vec<_> = agree.iter().map(|&e| y[e]).collect();
        let refine = refinement_features(&x, &y_hat, &y).unwrap();
        let agree_em = emission_features(&agree_x, &agree_y).unwrap();
        let full = emission_features(&x, &y).unwrap();
        for k in 0..PIXEL_BLOCK {
            assert_eq!(refine[k] + agree_em[k], full[k]);
        }
    }

    #[test]
    fn hamming_examples() {
        assert_eq!(hamming(&seq("123"), &seq("123")).unwrap(), 0);
        assert_eq!(hamming(&seq("123"), &seq("103")).unwrap(), 1);
        assert_eq!(hamming(&seq("+="), &seq("=+")).unwrap(), 2);
        assert!(hamming(&seq("1"), &seq("12")).is_err());
    }

    #[test]
    fn score_examples() {
        let x = vec![crate::glyph::template(Symbol::digit(1)); 5];
        let y = seq("1+1=2");
        let out = NetworkOutput::Hard(seq("1+7=3"));
        assert_eq!(nester_score(&StructuredWeights::zeros(), &x, &out, &y).unwrap(), 0.0);
        assert_eq!(nester_score(&StructuredWeights::distance_only(-1.0), &x, &out, &y).unwrap(), -2.0);
    }

    #[test]
    fn soft_reduces_to_hard_at_one_hot() {
        let x: Vec<_> = [1u8, 10, 8, 11, 9].iter().map(|&k| crate::glyph::template(Symbol::new(k).unwrap())).collect();
        let y = seq("1+8=9");
        let y_hat = seq("1+9=9");
        let p = one_hot(&y_hat);
        assert_eq!(soft_refinement_features(&x, &p, &y).unwrap(), refinement_features(&x, &y_hat, &y).unwrap());
        assert_eq!(soft_hamming(&y, &p).unwrap(), hamming(&y, &y_hat).unwrap() as f64);
    }

    #[test]
    fn uniform_soft_hamming() {
        let p = vec![[1.0 / 12.0; NUM_SYMBOLS]; 5];
        let v = soft_hamming(&seq("1+1=2"), &p).unwrap();
        assert!((v - 5.0 * 11.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let p = vec![[0.1; NUM_SYMBOLS]];
        assert!(matches!(soft_hamming(&seq("1"), &p), Err(ContractError::RowNotNormalized { row: 0, .. })));
    }

    #[test]
    fn weights_checkpoint_round_trips() {
        let mut w = StructuredWeights::zeros();
        for (i, v) in w.values_mut().enumerate() {
            *v = (i as f64 * 0.731).sin() / 7.0;
        }
        let mut buf = Vec::new();
        w.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"#nester-cst v1\nemission 81x12\n"));
        assert_eq!(StructuredWeights::read_from(buf.as_slice()).unwrap(), w);
        assert!(StructuredWeights::read_from(b"#nester-cnn v1\n".as_slice()).is_err());
    }
}
