//! Evaluation protocol: sequence error rates split into syntactic, semantic
//! and other errors, mean Hamming loss, and learning curves over the nested
//! training chunks.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::dataset::{DatasetBundle, EquationSample};
use crate::features::{hamming, NetworkOutput, Relaxation};
use crate::nn::predict_sequence;
use crate::solver::{predict, validate_with, Validity};
use crate::symbol::Symbol;
use crate::training::{pretrain_stage, structured_stages, ModelKind, PipelineConfig, TrainedModel};
use crate::{Error, Result};

pub const CURVES_HEADER: &str = "chunk_size,model,total_err,syntactic_err,semantic_err,other_err,mean_hamming";

/// Test-set metrics of one model. Rates are fractions of all test sequences;
/// `total_err = syntactic_err + semantic_err + other_err`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub chunk_size: usize,
    pub model: String,
    pub total_err: f64,
    pub syntactic_err: f64,
    pub semantic_err: f64,
    pub other_err: f64,
    pub mean_hamming: f64,
    /// Erroneous-sequence counts behind the rates.
    pub counts: ErrorCounts,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ErrorCounts {
    pub sequences: usize,
    pub syntactic: usize,
    pub semantic: usize,
    pub other: usize,
    pub hamming: usize,
}

impl ErrorCounts {
    pub fn errors(&self) -> usize {
        self.syntactic + self.semantic + self.other
    }

    /// Adds one prediction.
    pub fn record(&mut self, predicted: &[Symbol], gold: &[Symbol], max_digits: usize) -> Result<()> {
        self.sequences += 1;
        self.hamming += hamming(gold, predicted)?;
        if predicted != gold {
            match validate_with(predicted, max_digits) {
                Validity::SyntacticError => self.syntactic += 1,
                Validity::SemanticError => self.semantic += 1,
                Validity::Valid => self.other += 1,
            }
        }
        Ok(())
    }
}

impl EvalReport {
    pub fn from_counts(chunk_size: usize, model: &str, c: ErrorCounts) -> EvalReport {
        let n = c.sequences.max(1) as f64;
        EvalReport {
            chunk_size,
            model: model.to_string(),
            total_err: c.errors() as f64 / n,
            syntactic_err: c.syntactic as f64 / n,
            semantic_err: c.semantic as f64 / n,
            other_err: c.other as f64 / n,
            mean_hamming: c.hamming as f64 / n,
            counts: c,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.chunk_size, self.model, self.total_err, self.syntactic_err, self.semantic_err, self.other_err, self.mean_hamming
        )
    }
}

/// Scores fixed predictions against gold sequences.
pub fn score_predictions(predictions: &[Vec<Symbol>], gold: &[Vec<Symbol>], max_digits: usize) -> Result<ErrorCounts> {
    let mut c = ErrorCounts::default();
    for (p, g) in predictions.iter().zip(gold) {
        c.record(p, g, max_digits)?;
    }
    Ok(c)
}

/// Prediction of a trained model for one image sequence.
pub fn predict_with(model: &TrainedModel, images: &[crate::glyph::GlyphImage], mode: Relaxation, max_digits: usize) -> Result<Vec<Symbol>> {
    let Some(weights) = &model.weights else {
        return Ok(predict_sequence(&model.cnn, images)?.0);
    };
    let output = if model.kind.uses_network() {
        NetworkOutput::from_probs(&predict_sequence(&model.cnn, images)?.1, mode)
    } else {
        NetworkOutput::Hard(vec![Symbol::digit(0); images.len()])
    };
    Ok(predict(weights, images, &output, max_digits)?.sequence)
}

/// Evaluates `model` on `test`.
pub fn evaluate(
    model: &TrainedModel,
    test: &[EquationSample],
    chunk_size: usize,
    mode: Relaxation,
    max_digits: usize,
) -> Result<EvalReport> {
    let mut c = ErrorCounts::default();
    for s in test {
        let pred = predict_with(model, &s.images, mode, max_digits)?;
        c.record(&pred, &s.labels, max_digits)?;
    }
    Ok(EvalReport::from_counts(chunk_size, model.kind.id(), c))
}

/// Trains every model in `models` on each chunk in `chunks` (0-based) and
/// evaluates it on the test set, one report per (chunk, model).
///
/// With `csv`, rows are appended as they complete and (chunk size, model)
/// pairs already present in the file are skipped, so an interrupted run
/// resumes where it stopped. Skipped cells are not returned.
pub fn run_curves(
    dataset: &DatasetBundle,
    config: &PipelineConfig,
    models: &[ModelKind],
    chunks: &[usize],
    csv: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    let done = match csv {
        Some(path) => completed_cells(path)?,
        None => HashSet::new(),
    };
    let mut out = match csv {
        Some(path) => {
            let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{CURVES_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let max_digits = config.train.max_digits;
    let mut reports = Vec::new();
    for &k in chunks {
        let data =
            dataset.chunk(k).ok_or_else(|| Error::Config(format!("chunk {k} out of range (dataset has {})", dataset.chunk_sizes.len())))?;
        let todo: Vec<ModelKind> = models.iter().copied().filter(|m| !done.contains(&(data.len(), m.id().to_string()))).collect();
        if todo.is_empty() {
            continue;
        }
        let (pretrained, _) = pretrain_stage(data, config)?;
        for kind in todo {
            let cfg = PipelineConfig { model: kind, ..config.clone() };
            let (model, _) = structured_stages(&pretrained, data, &cfg)?;
            let report = evaluate(&model, &dataset.test, data.len(), config.train.mode, max_digits)?;
            if let Some(f) = out.as_mut() {
                writeln!(f, "{}", report.csv_row())?;
                f.flush()?;
            }
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Learning curves of the ablation variants.
pub fn run_ablations(dataset: &DatasetBundle, config: &PipelineConfig, chunks: &[usize], csv: Option<&Path>) -> Result<Vec<EvalReport>> {
    run_curves(dataset, config, &ModelKind::ABLATIONS, chunks, csv)
}

/// `(chunk_size, model)` pairs already present in a curves CSV.
fn completed_cells(path: &Path) -> Result<HashSet<(usize, String)>> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(done);
    }
    let mut lines = BufReader::new(File::open(path)?).lines();
    match lines.next().transpose()? {
        None => return Ok(done),
        Some(h) if h == CURVES_HEADER => {}
        Some(h) => return Err(Error::Config(format!("{}: unexpected header `{h}`", path.display()))),
    }
    for line in lines {
        let line = line?;
        let mut fields = line.split(',');
        if let (Some(size), Some(model)) = (fields.next(), fields.next()) {
            if let Ok(size) = size.parse() {
                done.insert((size, model.to_string()));
            }
        }
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, DatasetConfig};
    use crate::nn::{CnnConfig, CnnParams, PretrainConfig};
    use crate::symbol::parse_symbols;
    use crate::training::{Stages, TrainConfig};

    fn seq(s: &str) -> Vec<Symbol> {
        parse_symbols(s).unwrap()
    }

    #[test]
    fn perfect_predictions_score_zero() {
        let gold = vec![seq("1+1=2"), seq("12+9=21")];
        let r = EvalReport::from_counts(10, "x", score_predictions(&gold, &gold, 3).unwrap());
        assert_eq!((r.total_err, r.mean_hamming), (0.0, 0.0));
    }

    #[test]
    fn semantic_error_is_classified() {
        let r = EvalReport::from_counts(1, "x", score_predictions(&[seq("1+1=3")], &[seq("1+1=2")], 3).unwrap());
        assert_eq!((r.total_err, r.semantic_err, r.syntactic_err, r.other_err, r.mean_hamming), (1.0, 1.0, 0.0, 0.0, 1.0));
    }

    #[test]
    fn partition_covers_every_error() {
        let gold = vec![seq("1+1=2"), seq("1+1=2"), seq("1+1=2"), seq("1+1=2")];
        let pred = vec![seq("1+1=2"), seq("1+1+2"), seq("1+1=3"), seq("0+2=2")];
        let c = score_predictions(&pred, &gold, 3).unwrap();
        assert_eq!((c.syntactic, c.semantic, c.other), (1, 1, 1));
        let r = EvalReport::from_counts(4, "x", c);
        assert_eq!(r.total_err, r.syntactic_err + r.semantic_err + r.other_err);
    }

    fn tiny_setup() -> (DatasetBundle, PipelineConfig) {
        let data =
            generate_dataset(&DatasetConfig { n_train: 20, n_test: 15, n_chunks: 2, max_digits: 2, seed: 4, ..DatasetConfig::default() })
                .unwrap();
        let cfg = PipelineConfig {
            cnn: CnnConfig { conv1_filters: 4, conv2_filters: 4, hidden: 8, dropout_prob: 0.5 },
            pretrain: PretrainConfig { epochs: 1, ..PretrainConfig::default() },
            train: TrainConfig { max_digits: 2, ..TrainConfig::default() },
            stages: Stages::default(),
            model: ModelKind::Combined,
        };
        (data, cfg)
    }

    #[test]
    fn constrained_models_never_violate_constraints() {
        let (data, cfg) = tiny_setup();
        let reports =
            run_curves(&data, &cfg, &[ModelKind::Cnn, ModelKind::Cst, ModelKind::Combined, ModelKind::DistanceOnly], &[0], None).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports[1..] {
            assert_eq!((r.syntactic_err, r.semantic_err), (0.0, 0.0), "{r:?}");
        }
    }

    #[test]
    fn distance_only_keeps_a_valid_network_prediction() {
        let (data, _) = tiny_setup();
        // A network whose output bias favours nothing: zero weights predict
        // all zeros, so use gold one-hot probabilities through the solver directly.
        let s = &data.test[0];
        let model = TrainedModel {
            kind: ModelKind::DistanceOnly,
            cnn: CnnParams::zeros(&CnnConfig::default()),
            weights: Some(ModelKind::DistanceOnly.initial_weights()),
        };
        let probs: Vec<_> = s.labels.iter().map(|l| std::array::from_fn(|k| if k == l.index() { 0.9 } else { 0.1 / 11.0 })).collect();
        for mode in [Relaxation::Hard, Relaxation::Soft] {
            let out = NetworkOutput::from_probs(&probs, mode);
            let y = predict(model.weights.as_ref().unwrap(), &s.images, &out, 2).unwrap().sequence;
            assert_eq!(y, s.labels);
        }
    }

    #[test]
    fn curves_resume_and_are_deterministic() {
        let (data, cfg) = tiny_setup();
        let dir = std::env::temp_dir().join(format!("nester-curves-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("curves.csv");
        let _ = std::fs::remove_file(&path);
        let models = [ModelKind::Cnn, ModelKind::Combined];
        let first = run_curves(&data, &cfg, &models, &[0], Some(&path)).unwrap();
        let all = run_curves(&data, &cfg, &models, &[0, 1], Some(&path)).unwrap();
        assert_eq!(all.len(), 2, "chunk 0 cells are skipped on resume");
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 4);
        let fresh = run_curves(&data, &cfg, &models, &[0, 1], None).unwrap();
        assert_eq!(fresh[..2], first[..]);
        assert_eq!(fresh[2..], all[..]);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
