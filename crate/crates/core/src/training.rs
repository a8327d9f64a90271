//! Structured SVM learning by stochastic subgradient descent, end-to-end
//! fine-tuning through the network, and the three-stage pipeline.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetBundle, EquationSample};
use crate::features::{hamming, nester_score, score_grad_wrt_probs, JointFeatures, NetworkOutput, ProbRow, Relaxation, StructuredWeights};
use crate::glyph::GlyphImage;
use crate::nn::{
    adam_step, cnn_backward, forward_batch, loss_record_csv, predict_sequence, pretrain_cnn, AdamConfig, AdamState, CnnConfig, CnnParams,
    Mode, PretrainConfig, Upstream,
};
use crate::solver::{solve_loss_augmented, MAX_DIGITS};
use crate::symbol::Symbol;
use crate::{ContractError, Error, Result};

/// Hyperparameters of the structured stages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub eta_cst: f64,
    pub epochs_cst: usize,
    pub eta_ft: f64,
    pub epochs_ft: usize,
    pub mode: Relaxation,
    pub update_structured_in_ft: bool,
    pub seed: u64,
    pub max_digits: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-4,
            eta_cst: 0.05,
            epochs_cst: 1,
            eta_ft: 1e-4,
            epochs_ft: 1,
            mode: Relaxation::Soft,
            update_structured_in_ft: true,
            seed: 0,
            max_digits: MAX_DIGITS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        // Zero rates are allowed: they turn the corresponding stage into a no-op.
        for (name, v) in [("eta_cst", self.eta_cst), ("eta_ft", self.eta_ft)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(1..=MAX_DIGITS).contains(&self.max_digits) {
            return bad(format!("max_digits {} outside 1..={MAX_DIGITS}", self.max_digits));
        }
        Ok(())
    }

    /// Step size of the `t`-th structured update (1-based): `eta_cst / sqrt(t)`.
    pub fn structured_rate(&self, t: usize) -> f64 {
        self.eta_cst / (t.max(1) as f64).sqrt()
    }
}

/// Which weight blocks a model learns; inactive blocks receive no updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMask {
    pub emission: bool,
    pub transition: bool,
    pub refinement: bool,
    pub delta: bool,
}

impl FeatureMask {
    pub const ALL: FeatureMask = FeatureMask { emission: true, transition: true, refinement: true, delta: true };
    pub const NONE: FeatureMask = FeatureMask { emission: false, transition: false, refinement: false, delta: false };

    /// Zeroes the inactive blocks of `w`.
    pub fn apply(&self, w: &mut StructuredWeights) {
        if !self.emission {
            w.emission.iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.transition {
            w.transition.iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.refinement {
            w.refinement.iter_mut().for_each(|v| *v = 0.0);
        }
        if !self.delta {
            w.delta = 0.0;
        }
    }

    /// True when the score depends on the network output.
    pub fn uses_network(&self) -> bool {
        self.refinement || self.delta
    }
}

/// The models of the learning-curve and ablation experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// The network's argmax predictions, unconstrained.
    Cnn,
    /// Emission and transition features only, no network.
    Cst,
    /// All features, CST training and end-to-end fine-tuning.
    Combined,
    /// `w_delta = -1`, everything else zero; no learning.
    DistanceOnly,
    Refinement,
    RefinementDistance,
    /// Refinement plus emission and transition.
    RefinementPrediction,
    /// The combined model under its ablation-study name.
    Full,
}

impl ModelKind {
    pub const CURVES: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::Cst, ModelKind::Combined];
    pub const ABLATIONS: [ModelKind; 5] =
        [ModelKind::DistanceOnly, ModelKind::Refinement, ModelKind::RefinementDistance, ModelKind::RefinementPrediction, ModelKind::Full];

    pub fn id(&self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Cst => "cst",
            ModelKind::Combined => "combined",
            ModelKind::DistanceOnly => "distance-only",
            ModelKind::Refinement => "refinement",
            ModelKind::RefinementDistance => "refinement+distance",
            ModelKind::RefinementPrediction => "refinement+prediction",
            ModelKind::Full => "full",
        }
    }

    /// Learnable blocks; `None` for the unconstrained network.
    pub fn mask(&self) -> Option<FeatureMask> {
        let m = |emission, transition, refinement, delta| Some(FeatureMask { emission, transition, refinement, delta });
        match self {
            ModelKind::Cnn => None,
            ModelKind::Cst => m(true, true, false, false),
            ModelKind::Combined | ModelKind::Full => Some(FeatureMask::ALL),
            ModelKind::DistanceOnly => Some(FeatureMask::NONE),
            ModelKind::Refinement => m(false, false, true, false),
            ModelKind::RefinementDistance => m(false, false, true, true),
            ModelKind::RefinementPrediction => m(true, true, true, false),
        }
    }

    /// Whether predictions depend on the network at all.
    pub fn uses_network(&self) -> bool {
        !matches!(self, ModelKind::Cst)
    }

    pub fn is_constrained(&self) -> bool {
        !matches!(self, ModelKind::Cnn)
    }

    /// Whether the structured weights are learned.
    pub fn learns_structure(&self) -> bool {
        !matches!(self, ModelKind::Cnn | ModelKind::DistanceOnly)
    }

    /// Whether the network is fine-tuned through the structured loss.
    pub fn finetunes(&self) -> bool {
        self.learns_structure() && self.mask().is_some_and(|m| m.uses_network())
    }

    pub fn initial_weights(&self) -> StructuredWeights {
        match self {
            ModelKind::DistanceOnly => StructuredWeights::distance_only(-1.0),
            _ => StructuredWeights::zeros(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<ModelKind> {
        [ModelKind::CURVES.as_slice(), ModelKind::ABLATIONS.as_slice()]
            .concat()
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

/// Result of evaluating the structured hinge at one example.
#[derive(Clone, Debug, PartialEq)]
pub struct HingeOutcome {
    /// `max(0, Δ(gold, y*) + score(y*) - score(gold)) + λ/2 ‖w‖²`.
    pub value: f64,
    /// The margin term before clipping at zero.
    pub margin: f64,
    pub y_star: Vec<Symbol>,
    pub hamming: usize,
    pub subgradient: StructuredWeights,
}

impl HingeOutcome {
    pub fn violated(&self) -> bool {
        self.margin > 0.0
    }
}

/// Structured hinge loss and a subgradient over all four weight blocks.
pub fn structured_hinge(
    weights: &StructuredWeights,
    x: &[GlyphImage],
    output: &NetworkOutput,
    gold: &[Symbol],
    lambda: f64,
    max_digits: usize,
) -> Result<HingeOutcome> {
    let y_star = solve_loss_augmented(weights, x, output, gold, max_digits)?.sequence;
    let h = hamming(gold, &y_star)?;
    let phi_star = JointFeatures::compute(x, output, &y_star)?;
    let phi_gold = JointFeatures::compute(x, output, gold)?;
    let margin = h as f64 + weights.dot(&phi_star) - weights.dot(&phi_gold);
    let mut subgradient = weights.clone();
    subgradient.scale(lambda);
    if margin > 0.0 {
        subgradient.add_features(1.0, &phi_star);
        subgradient.add_features(-1.0, &phi_gold);
    }
    Ok(HingeOutcome { value: margin.max(0.0) + 0.5 * lambda * weights.norm_sq(), margin, y_star, hamming: h, subgradient })
}

/// Training stage that produced a [`HingeRecord`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Cst,
    Finetune,
}

impl Stage {
    pub fn id(&self) -> &'static str {
        match self {
            Stage::Cst => "cst",
            Stage::Finetune => "finetune",
        }
    }
}

/// One structured update, as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct HingeRecord {
    pub stage: Stage,
    /// 1-based step counter, shared by both stages.
    pub step: usize,
    /// Index of the example within the chunk.
    pub example: usize,
    pub hinge: f64,
    pub hamming_to_gold: usize,
}

pub const STAGE_LOG_HEADER: &str = "stage,step,example,hinge,hamming_to_gold";

pub fn stage_log_csv(records: &[HingeRecord]) -> String {
    let mut out = format!("{STAGE_LOG_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{},{},{},{}\n", r.stage.id(), r.step, r.example, r.hinge, r.hamming_to_gold));
    }
    out
}

/// Dedicated rng stream per pipeline stage, so stages can be rerun independently.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_CST: u64 = 3;
const STREAM_FINETUNE: u64 = 4;

/// Stochastic subgradient descent on the structured hinge: `epochs_cst`
/// shuffled passes, one update `w -= eta_t * g` per example with
/// `eta_t = eta_cst / sqrt(t)`. Inactive blocks of `mask` are never updated.
pub fn train_cst(
    weights: &StructuredWeights,
    samples: &[EquationSample],
    outputs: &[NetworkOutput],
    config: &TrainConfig,
    mask: FeatureMask,
) -> Result<(StructuredWeights, Vec<HingeRecord>)> {
    config.validate()?;
    if samples.len() != outputs.len() {
        return Err(ContractError::LengthMismatch { expected: samples.len(), found: outputs.len() }.into());
    }
    let mut w = weights.clone();
    let mut rng = stage_rng(config.seed, STREAM_CST);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::with_capacity(samples.len() * config.epochs_cst);
    for _ in 0..config.epochs_cst {
        order.shuffle(&mut rng);
        for &i in &order {
            let s = &samples[i];
            let outcome = structured_hinge(&w, &s.images, &outputs[i], &s.labels, config.lambda, config.max_digits)?;
            let step = records.len() + 1;
            let mut g = outcome.subgradient;
            mask.apply(&mut g);
            w.add_scaled(-config.structured_rate(step), &g);
            if !w.is_finite() {
                return Err(ContractError::NonFinite("structured weights").into());
            }
            records.push(HingeRecord { stage: Stage::Cst, step, example: i, hinge: outcome.value, hamming_to_gold: outcome.hamming });
        }
    }
    Ok((w, records))
}

/// `∂/∂P [score(y*) - score(gold)]`: the network-facing gradient of the
/// hinge's margin term with `y*` held fixed.
pub fn margin_grad_wrt_probs(weights: &StructuredWeights, x: &[GlyphImage], y_star: &[Symbol], gold: &[Symbol]) -> Result<Vec<ProbRow>> {
    let plus = score_grad_wrt_probs(weights, x, y_star)?;
    let minus = score_grad_wrt_probs(weights, x, gold)?;
    Ok(plus.iter().zip(&minus).map(|(a, b)| std::array::from_fn(|k| a[k] - b[k])).collect())
}

/// Margin term `Δ(gold, y*) + score(y*) - score(gold)` under the soft
/// relaxation, for a fixed rival `y*`.
pub fn soft_margin(weights: &StructuredWeights, x: &[GlyphImage], probs: &[ProbRow], gold: &[Symbol], y_star: &[Symbol]) -> Result<f64> {
    let output = NetworkOutput::Soft(probs.to_vec());
    Ok(hamming(gold, y_star)? as f64 + nester_score(weights, x, &output, y_star)? - nester_score(weights, x, &output, gold)?)
}

/// End-to-end fine-tuning: per example, forward the network, find `y*`,
/// backpropagate the margin's gradient through the softmax and every layer,
/// and take an Adam step; optionally also a structured subgradient step.
///
/// Structured steps continue the `1/sqrt(t)` schedule after `step_offset`
/// earlier updates. In hard mode the network output is the argmax and the
/// soft gradient is used as a straight-through estimate.
pub fn finetune_end_to_end(
    cnn: &CnnParams,
    weights: &StructuredWeights,
    samples: &[EquationSample],
    config: &TrainConfig,
    mask: FeatureMask,
    step_offset: usize,
) -> Result<(CnnParams, StructuredWeights, Vec<HingeRecord>)> {
    config.validate()?;
    let mut cnn = cnn.clone();
    let mut w = weights.clone();
    let mut adam = AdamState::new(&cnn, AdamConfig { lr: config.eta_ft, ..AdamConfig::default() });
    let mut rng = stage_rng(config.seed, STREAM_FINETUNE);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut records = Vec::new();
    for _ in 0..config.epochs_ft {
        order.shuffle(&mut rng);
        for &i in &order {
            let s = &samples[i];
            let refs: Vec<&GlyphImage> = s.images.iter().collect();
            let cache = forward_batch(&cnn, &refs, Mode::Eval)?;
            let output = NetworkOutput::from_probs(cache.probs(), config.mode);
            let outcome = structured_hinge(&w, &s.images, &output, &s.labels, config.lambda, config.max_digits)?;
            if outcome.violated() && config.eta_ft > 0.0 {
                let dp = margin_grad_wrt_probs(&w, &s.images, &outcome.y_star, &s.labels)?;
                if dp.iter().flatten().any(|&v| v != 0.0) {
                    let grads = cnn_backward(&cnn, &cache, Upstream::Probs(&dp))?;
                    adam_step(&mut cnn, &grads, &mut adam)?;
                }
            }
            let step = step_offset + records.len() + 1;
            if config.update_structured_in_ft {
                let mut g = outcome.subgradient;
                mask.apply(&mut g);
                w.add_scaled(-config.structured_rate(step), &g);
                if !w.is_finite() {
                    return Err(ContractError::NonFinite("structured weights").into());
                }
            }
            records.push(HingeRecord { stage: Stage::Finetune, step, example: i, hinge: outcome.value, hamming_to_gold: outcome.hamming });
        }
    }
    Ok((cnn, w, records))
}

/// Network outputs for every sample, as seen by the structured model.
pub fn network_outputs(cnn: &CnnParams, samples: &[EquationSample], mode: Relaxation) -> Result<Vec<NetworkOutput>> {
    samples
        .iter()
        .map(|s| {
            let (_, probs) = predict_sequence(cnn, &s.images)?;
            Ok(NetworkOutput::from_probs(&probs, mode))
        })
        .collect()
}

/// Output used by models that ignore the network: every weight touching it
/// is zero, so its content never affects a score.
pub fn placeholder_outputs(samples: &[EquationSample]) -> Vec<NetworkOutput> {
    samples.iter().map(|s| NetworkOutput::Hard(vec![Symbol::digit(0); s.len()])).collect()
}

/// Which pipeline stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    pub pretrain: bool,
    pub cst: bool,
    pub finetune: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { pretrain: true, cst: true, finetune: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub model: ModelKind,
    pub cnn: CnnConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub stages: Stages,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelKind::Combined,
            cnn: CnnConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            stages: Stages::default(),
        }
    }
}

/// A trained model ready for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub cnn: CnnParams,
    /// `None` for the unconstrained network.
    pub weights: Option<StructuredWeights>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub model: TrainedModel,
    pub pretrain_loss: Vec<f64>,
    pub records: Vec<HingeRecord>,
}

/// Freshly initialized network for a pipeline seed.
pub fn initial_cnn(config: &PipelineConfig) -> Result<CnnParams> {
    config.cnn.validate()?;
    Ok(CnnParams::init(&config.cnn, &mut stage_rng(config.train.seed, STREAM_INIT)))
}

/// Stage 1: per-glyph pretraining (or the initial network when disabled).
pub fn pretrain_stage(chunk: &[EquationSample], config: &PipelineConfig) -> Result<(CnnParams, Vec<f64>)> {
    let cnn = initial_cnn(config)?;
    if !config.stages.pretrain {
        return Ok((cnn, Vec::new()));
    }
    Ok(pretrain_cnn(&cnn, chunk, &config.pretrain, &mut stage_rng(config.train.seed, STREAM_PRETRAIN))?)
}

/// Stages 2 and 3 for `config.model`, starting from a pretrained network.
pub fn structured_stages(cnn: &CnnParams, chunk: &[EquationSample], config: &PipelineConfig) -> Result<(TrainedModel, Vec<HingeRecord>)> {
    let kind = config.model;
    let Some(mask) = kind.mask() else {
        return Ok((TrainedModel { kind, cnn: cnn.clone(), weights: None }, Vec::new()));
    };
    let mut weights = kind.initial_weights();
    let mut cnn = cnn.clone();
    let mut records = Vec::new();
    if kind.learns_structure() && config.stages.cst {
        let outputs = if kind.uses_network() { network_outputs(&cnn, chunk, config.train.mode)? } else { placeholder_outputs(chunk) };
        let (w, r) = train_cst(&weights, chunk, &outputs, &config.train, mask)?;
        weights = w;
        records = r;
    }
    if kind.finetunes() && config.stages.finetune {
        let (c, w, r) = finetune_end_to_end(&cnn, &weights, chunk, &config.train, mask, records.len())?;
        cnn = c;
        weights = w;
        records.extend(r);
    }
    Ok((TrainedModel { kind, cnn, weights: Some(weights) }, records))
}

/// Runs pretrain → train_cst → finetune on training chunk `chunk` (0-based).
/// With `out_dir`, each stage's checkpoint is written as soon as the stage
/// completes, so a later failure leaves earlier checkpoints in place.
pub fn run_pipeline(dataset: &DatasetBundle, chunk: usize, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineOutput> {
    config.train.validate()?;
    let data = dataset
        .chunk(chunk)
        .ok_or_else(|| Error::Config(format!("chunk {chunk} out of range (dataset has {})", dataset.chunk_sizes.len())))?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let (pretrained, pretrain_loss) = pretrain_stage(data, config)?;
    if let Some(dir) = out_dir {
        write_atomic(&dir.join("cnn_pretrain.ckpt"), |f| Ok(pretrained.write_to(f)?))?;
        write_atomic(&dir.join("pretrain_loss.csv"), |f| Ok(f.write_all(loss_record_csv(&pretrain_loss).as_bytes())?))?;
    }
    let (model, records) = structured_stages(&pretrained, data, config)?;
    if let Some(dir) = out_dir {
        if let Some(w) = &model.weights {
            write_atomic(&dir.join("cst.ckpt"), |f| Ok(w.write_to(f)?))?;
            write_atomic(&dir.join("cnn.ckpt"), |f| Ok(model.cnn.write_to(f)?))?;
        }
        write_atomic(&dir.join("stage_log.csv"), |f| Ok(f.write_all(stage_log_csv(&records).as_bytes())?))?;
    }
    Ok(PipelineOutput { model, pretrain_loss, records })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut fs::File) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    write(&mut f)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};
    use crate::solver::{brute_force_map, compile_chain};
    use rand::Rng;

    fn small_data(n: usize, seed: u64) -> DatasetBundle {
        generate_dataset(&DatasetConfig { n_train: n, n_test: 10, n_chunks: 1, max_digits: 2, seed, ..DatasetConfig::default() }).unwrap()
    }

    fn random_weights(rng: &mut impl Rng, scale: f64) -> StructuredWeights {
        let mut w = StructuredWeights::zeros();
        w.values_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        w
    }

    fn random_probs(rng: &mut impl Rng, m: usize) -> Vec<ProbRow> {
        (0..m)
            .map(|_| {
                let mut r: ProbRow = std::array::from_fn(|_| rng.random_range(0.01..1.0));
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|v| *v /= s);
                r
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_max_hamming_and_feature_difference() {
        let data = small_data(20, 1);
        for s in &data.train {
            let out = NetworkOutput::Hard(s.labels.clone());
            let h = structured_hinge(&StructuredWeights::zeros(), &s.images, &out, &s.labels, 1e-4, 2).unwrap();
            // Oracle: brute-force loss-augmented argmax of the zero model is the max Hamming.
            let chain = compile_chain(&StructuredWeights::zeros(), &s.images, &out, Some(&s.labels)).unwrap();
            let oracle = brute_force_map(&chain, 2).unwrap();
            assert_eq!(h.value, oracle.score);
            assert_eq!(h.y_star, oracle.sequence);
            let mut diff = StructuredWeights::zeros();
            diff.add_features(1.0, &JointFeatures::compute(&s.images, &out, &h.y_star).unwrap());
            diff.add_features(-1.0, &JointFeatures::compute(&s.images, &out, &s.labels).unwrap());
            assert_eq!(h.subgradient, diff);
        }
    }

    #[test]
    fn dominant_margin_gives_only_the_regularizer() {
        let data = small_data(5, 2);
        let s = &data.train[0];
        let out = NetworkOutput::Hard(s.labels.clone());
        // A large negative distance weight puts every rival at least 20 below gold.
        let w = StructuredWeights::distance_only(-20.0);
        let lambda = 0.3;
        let h = structured_hinge(&w, &s.images, &out, &s.labels, lambda, 2).unwrap();
        assert_eq!(h.y_star, s.labels);
        assert!((h.value - 0.5 * lambda * 400.0).abs() < 1e-12);
        let mut expected = w.clone();
        expected.scale(lambda);
        assert_eq!(h.subgradient, expected);
    }

    #[test]
    fn hinge_is_non_negative_and_y_star_dominates_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = small_data(200, 3);
        for (i, s) in data.train.iter().enumerate() {
            let w = random_weights(&mut rng, 0.5);
            let out = NetworkOutput::Soft(random_probs(&mut rng, s.len()));
            let h = structured_hinge(&w, &s.images, &out, &s.labels, 1e-3, 2).unwrap();
            assert!(h.value >= -1e-9, "instance {i}");
            assert!(h.margin >= -1e-9, "y* must score at least as high as gold under augmentation");
        }
    }

    #[test]
    fn subgradient_inequality_holds_where_y_star_is_unchanged() {
        // L(u) >= L(w) + <g, u - w> for u with the same loss-augmented maximizer.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = small_data(40, 4);
        let lambda = 0.01;
        let mut checked = 0;
        for s in &data.train {
            let w = random_weights(&mut rng, 0.3);
            let out = NetworkOutput::Soft(random_probs(&mut rng, s.len()));
            let at_w = structured_hinge(&w, &s.images, &out, &s.labels, lambda, 2).unwrap();
            for _ in 0..5 {
                let mut u = w.clone();
                u.add_scaled(1.0, &random_weights(&mut rng, 0.05));
                let at_u = structured_hinge(&u, &s.images, &out, &s.labels, lambda, 2).unwrap();
                if at_u.y_star != at_w.y_star {
                    continue;
                }
                let mut diff = u.clone();
                diff.add_scaled(-1.0, &w);
                let lin: f64 = at_w.subgradient.values().zip(diff.values()).map(|(a, b)| a * b).sum();
                assert!(at_u.value >= at_w.value + lin - 1e-6);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn empty_chunk_and_zero_rate_leave_weights_unchanged() {
        let w = StructuredWeights::distance_only(-0.5);
        let (same, records) = train_cst(&w, &[], &[], &TrainConfig::default(), FeatureMask::ALL).unwrap();
        assert_eq!(same, w);
        assert!(records.is_empty());

        let data = small_data(10, 5);
        let outputs = placeholder_outputs(&data.train);
        let cfg = TrainConfig { eta_cst: 0.0, max_digits: 2, ..TrainConfig::default() };
        let (same, records) = train_cst(&w, &data.train, &outputs, &cfg, FeatureMask::ALL).unwrap();
        assert_eq!(same, w);
        assert_eq!(records.len(), 10);
    }

    #[test]
    fn repeated_small_steps_do_not_increase_the_hinge() {
        // Fixed instance, y* held fixed: the margin term is linear in w, so a
        // small step along -g cannot increase L.
        let data = small_data(3, 6);
        let s = &data.train[0];
        let out = NetworkOutput::Hard(s.labels.clone());
        let lambda = 1e-2;
        let mut w = StructuredWeights::zeros();
        let y_star = structured_hinge(&w, &s.images, &out, &s.labels, lambda, 2).unwrap().y_star;
        let fixed = |w: &StructuredWeights| {
            let m = hamming(&s.labels, &y_star).unwrap() as f64 + nester_score(w, &s.images, &out, &y_star).unwrap()
                - nester_score(w, &s.images, &out, &s.labels).unwrap();
            m.max(0.0) + 0.5 * lambda * w.norm_sq()
        };
        let mut prev = fixed(&w);
        for _ in 0..10 {
            let mut g = w.clone();
            g.scale(lambda);
            let phi_star = JointFeatures::compute(&s.images, &out, &y_star).unwrap();
            let phi_gold = JointFeatures::compute(&s.images, &out, &s.labels).unwrap();
            if fixed(&w) > 0.5 * lambda * w.norm_sq() {
                g.add_features(1.0, &phi_star);
                g.add_features(-1.0, &phi_gold);
            }
            w.add_scaled(-1e-4, &g);
            let now = fixed(&w);
            assert!(now <= prev + 1e-12, "{now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn masked_blocks_stay_zero() {
        let data = small_data(30, 7);
        let outputs = placeholder_outputs(&data.train);
        let cfg = TrainConfig { max_digits: 2, ..TrainConfig::default() };
        let mask = ModelKind::Cst.mask().unwrap();
        let (w, _) = train_cst(&StructuredWeights::zeros(), &data.train, &outputs, &cfg, mask).unwrap();
        assert!(w.refinement.iter().all(|&v| v == 0.0) && w.delta == 0.0);
        assert!(w.emission.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_network_weights_leave_cnn_untouched() {
        let data = small_data(8, 8);
        let cfg = PipelineConfig::default();
        let cnn = initial_cnn(&cfg).unwrap();
        let train = TrainConfig { max_digits: 2, update_structured_in_ft: false, ..TrainConfig::default() };
        let (after, w, records) = finetune_end_to_end(&cnn, &StructuredWeights::zeros(), &data.train, &train, FeatureMask::ALL, 0).unwrap();
        assert_eq!(after, cnn);
        assert_eq!(w, StructuredWeights::zeros());
        assert_eq!(records.len(), 8);
    }

    #[test]
    fn one_finetune_step_decreases_the_soft_hinge() {
        let data = small_data(10, 9);
        let cfg = PipelineConfig::default();
        let cnn = initial_cnn(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = &data.train[0];
        let w = random_weights(&mut rng, 0.5);
        let (_, probs) = predict_sequence(&cnn, &s.images).unwrap();
        let out = NetworkOutput::Soft(probs.clone());
        let h = structured_hinge(&w, &s.images, &out, &s.labels, 0.0, 2).unwrap();
        assert!(h.violated());
        let before = soft_margin(&w, &s.images, &probs, &s.labels, &h.y_star).unwrap();
        let train = TrainConfig { max_digits: 2, eta_ft: 1e-4, update_structured_in_ft: false, lambda: 0.0, ..TrainConfig::default() };
        let (after_cnn, _, _) = finetune_end_to_end(&cnn, &w, std::slice::from_ref(s), &train, FeatureMask::ALL, 0).unwrap();
        let (_, probs_after) = predict_sequence(&after_cnn, &s.images).unwrap();
        let after = soft_margin(&w, &s.images, &probs_after, &s.labels, &h.y_star).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn disabled_structured_stages_reduce_to_pretraining() {
        let data = small_data(20, 11);
        let cfg = PipelineConfig {
            stages: Stages { pretrain: true, cst: false, finetune: false },
            pretrain: PretrainConfig { epochs: 2, ..PretrainConfig::default() },
            train: TrainConfig { max_digits: 2, ..TrainConfig::default() },
            ..PipelineConfig::default()
        };
        let out = run_pipeline(&data, 0, &cfg, None).unwrap();
        let (alone, loss) =
            pretrain_cnn(&initial_cnn(&cfg).unwrap(), &data.train, &cfg.pretrain, &mut stage_rng(0, STREAM_PRETRAIN)).unwrap();
        assert_eq!(out.model.cnn, alone);
        assert_eq!(out.pretrain_loss, loss);
        assert_eq!(out.model.weights, Some(StructuredWeights::zeros()));
    }

    #[test]
    fn model_ids_round_trip() {
        for m in ModelKind::CURVES.iter().chain(&ModelKind::ABLATIONS) {
            assert_eq!(m.id().parse::<ModelKind>().unwrap(), *m);
        }
        assert!("lstm".parse::<ModelKind>().is_err());
    }
}
