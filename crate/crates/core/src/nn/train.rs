use rand::seq::SliceRandom;
use rand::RngCore;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::cnn::{cnn_backward, forward_batch, CnnParams, Mode, Upstream};
use crate::dataset::EquationSample;
use crate::features::{argmax_symbol, ProbRow};
use crate::glyph::GlyphImage;
use crate::symbol::Symbol;
use crate::{ContractError, NnError};

/// Per-glyph supervised pretraining settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 30, batch_size: 64, adam: AdamConfig::default() }
    }
}

/// Softmax cross-entropy gradient at the logits: `P - onehot(label)`.
pub fn xent_logit_grad(probs: &[ProbRow], labels: &[Symbol]) -> Result<Vec<ProbRow>, ContractError> {
    if probs.len() != labels.len() {
        return Err(ContractError::LengthMismatch { expected: probs.len(), found: labels.len() });
    }
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, s)| {
            let mut g = *p;
            g[s.index()] -= 1.0;
            g
        })
        .collect())
}

/// Trains on every `(image, label)` pair of the chunk, shuffled each epoch.
/// Returns the trained copy and the mean training cross-entropy of each epoch.
pub fn pretrain_cnn(
    params: &CnnParams,
    chunk: &[EquationSample],
    config: &PretrainConfig,
    rng: &mut dyn RngCore,
) -> Result<(CnnParams, Vec<f64>), NnError> {
    if chunk.is_empty() {
        return Err(ContractError::Empty.into());
    }
    if config.batch_size == 0 {
        return Err(ContractError::Shape("batch_size must be positive".into()).into());
    }
    let glyphs: Vec<(&GlyphImage, Symbol)> = chunk.iter().flat_map(|s| s.images.iter().zip(s.labels.iter().copied())).collect();
    let mut params = params.clone();
    let mut state = AdamState::new(&params, config.adam);
    let mut order: Vec<usize> = (0..glyphs.len()).collect();
    let mut record = Vec::with_capacity(config.epochs);

    for _ in 0..config.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let images: Vec<&GlyphImage> = batch.iter().map(|&i| glyphs[i].0).collect();
            let labels: Vec<Symbol> = batch.iter().map(|&i| glyphs[i].1).collect();
            let cache = forward_batch(&params, &images, Mode::Train(&mut *rng))?;
            total += cache.cross_entropy(&labels)?.iter().sum::<f64>();
            let scale = 1.0 / batch.len() as f64;
            let mut upstream = xent_logit_grad(cache.probs(), &labels)?;
            upstream.iter_mut().flatten().for_each(|v| *v *= scale);
            let grads = cnn_backward(&params, &cache, Upstream::Logits(&upstream))?;
            adam_step(&mut params, &grads, &mut state)?;
        }
        record.push(total / glyphs.len() as f64);
    }
    Ok((params, record))
}

/// Eval-mode classification of a glyph sequence: argmax symbols (ties to the
/// smaller id) and the probability rows.
pub fn predict_sequence(params: &CnnParams, images: &[GlyphImage]) -> Result<(Vec<Symbol>, Vec<ProbRow>), NnError> {
    let refs: Vec<&GlyphImage> = images.iter().collect();
    let cache = forward_batch(params, &refs, Mode::Eval)?;
    let probs = cache.probs().to_vec();
    Ok((probs.iter().map(argmax_symbol).collect(), probs))
}

/// Fraction of glyphs in `samples` whose argmax matches the label.
pub fn glyph_accuracy(params: &CnnParams, samples: &[EquationSample]) -> Result<f64, NnError> {
    let (mut right, mut total) = (0usize, 0usize);
    for s in samples {
        let (pred, _) = predict_sequence(params, &s.images)?;
        right += pred.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        total += s.len();
    }
    Ok(if total == 0 { 0.0 } else { right as f64 / total as f64 })
}

/// Serializes a loss record as `epoch,avg_xent` CSV (epochs numbered from 1).
pub fn loss_record_csv(record: &[f64]) -> String {
    let mut out = String::from("epoch,avg_xent\n");
    for (i, v) in record.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, v));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyph::{render_glyph, NoiseConfig};
    use crate::nn::cnn::CnnConfig;
    use crate::symbol::NUM_SYMBOLS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noiseless_glyph_set(n: usize, seed: u64) -> Vec<EquationSample> {
        // Single-glyph "sequences" are enough for per-glyph training.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let id = (i % NUM_SYMBOLS) as u8;
                let noise = NoiseConfig { flip_prob: 0.0, max_shift: 1 };
                EquationSample { images: vec![render_glyph(id, &noise, &mut rng).unwrap()], labels: vec![Symbol::new(id).unwrap()] }
            })
            .collect()
    }

    #[test]
    fn xent_gradient_vanishes_at_one_hot_argmax() {
        let mut p = [0.0; NUM_SYMBOLS];
        p[4] = 1.0;
        let g = xent_logit_grad(&[p], &[Symbol::digit(4)]).unwrap();
        assert!(g[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let cfg = CnnConfig::default();
        let p = CnnParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let data = noiseless_glyph_set(12, 0);
        let (q, record) =
            pretrain_cnn(&p, &data, &PretrainConfig { epochs: 0, ..PretrainConfig::default() }, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(p, q);
        assert!(record.is_empty());
    }

    #[test]
    fn empty_chunk_is_rejected() {
        let p = CnnParams::zeros(&CnnConfig::default());
        assert!(pretrain_cnn(&p, &[], &PretrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_params_predict_all_zeros() {
        let p = CnnParams::zeros(&CnnConfig::default());
        let imgs: Vec<GlyphImage> = noiseless_glyph_set(5, 1).into_iter().map(|s| s.images[0].clone()).collect();
        let (pred, probs) = predict_sequence(&p, &imgs).unwrap();
        assert!(pred.iter().all(|s| *s == Symbol::digit(0)));
        for row in probs {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn learns_noiseless_glyphs_reproducibly() {
        let cfg = CnnConfig::default();
        let data = noiseless_glyph_set(1200, 7);
        let p0 = CnnParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let run = || pretrain_cnn(&p0, &data, &PretrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (p, record) = run();
        assert_eq!(record.len(), 30);
        assert!(glyph_accuracy(&p, &data).unwrap() >= 0.99);
        let (_, again) = run();
        assert_eq!(record, again);
    }
}
