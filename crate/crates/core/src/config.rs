//! Flat `key = value` configuration files.
//!
//! ```text
//! # structured stages
//! lambda = 1e-4
//! eta_cst = 0.05
//! mode = soft
//! pretrain_epochs = 30
//! ```
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.

use std::path::Path;

use crate::features::Relaxation;
use crate::training::PipelineConfig;
use crate::{Error, Result};

/// Every accepted key, in documentation order.
pub const KEYS: [&str; 17] = [
    "seed",
    "lambda",
    "eta_cst",
    "epochs_cst",
    "eta_ft",
    "epochs_ft",
    "mode",
    "update_structured_in_ft",
    "max_digits",
    "pretrain_epochs",
    "batch_size",
    "adam_lr",
    "conv1_filters",
    "conv2_filters",
    "hidden",
    "dropout_prob",
    "stages",
];

/// Applies the assignments in `text` on top of `base`.
pub fn parse_config(text: &str, base: &PipelineConfig) -> Result<PipelineConfig> {
    let mut cfg = base.clone();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
        let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, found `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        set(&mut cfg, key, value).map_err(err)?;
    }
    cfg.cnn.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>, base: &PipelineConfig) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text, base)
}

/// Renders `cfg` in the format read by [`parse_config`].
pub fn render_config(cfg: &PipelineConfig) -> String {
    let t = &cfg.train;
    let stages: Vec<&str> = [("pretrain", cfg.stages.pretrain), ("cst", cfg.stages.cst), ("finetune", cfg.stages.finetune)]
        .iter()
        .filter(|(_, on)| *on)
        .map(|(n, _)| *n)
        .collect();
    [
        format!("seed = {}", t.seed),
        format!("lambda = {}", t.lambda),
        format!("eta_cst = {}", t.eta_cst),
        format!("epochs_cst = {}", t.epochs_cst),
        format!("eta_ft = {}", t.eta_ft),
        format!("epochs_ft = {}", t.epochs_ft),
        format!("mode = {}", if t.mode == Relaxation::Soft { "soft" } else { "hard" }),
        format!("update_structured_in_ft = {}", t.update_structured_in_ft),
        format!("max_digits = {}", t.max_digits),
        format!("pretrain_epochs = {}", cfg.pretrain.epochs),
        format!("batch_size = {}", cfg.pretrain.batch_size),
        format!("adam_lr = {}", cfg.pretrain.adam.lr),
        format!("conv1_filters = {}", cfg.cnn.conv1_filters),
        format!("conv2_filters = {}", cfg.cnn.conv2_filters),
        format!("hidden = {}", cfg.cnn.hidden),
        format!("dropout_prob = {}", cfg.cnn.dropout_prob),
        format!("stages = {}", stages.join(",")),
    ]
    .join("\n")
        + "\n"
}

fn set(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), String> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
        value.parse().map_err(|_| format!("{key}: cannot parse `{value}`"))
    }
    match key {
        "seed" => cfg.train.seed = num(key, value)?,
        "lambda" => cfg.train.lambda = num(key, value)?,
        "eta_cst" => cfg.train.eta_cst = num(key, value)?,
        "epochs_cst" => cfg.train.epochs_cst = num(key, value)?,
        "eta_ft" => cfg.train.eta_ft = num(key, value)?,
        "epochs_ft" => cfg.train.epochs_ft = num(key, value)?,
        "mode" => {
            cfg.train.mode = match value {
                "soft" => Relaxation::Soft,
                "hard" => Relaxation::Hard,
                _ => return Err(format!("mode must be `soft` or `hard`, found `{value}`")),
            }
        }
        "update_structured_in_ft" => cfg.train.update_structured_in_ft = num(key, value)?,
        "max_digits" => cfg.train.max_digits = num(key, value)?,
        "pretrain_epochs" => cfg.pretrain.epochs = num(key, value)?,
        "batch_size" => cfg.pretrain.batch_size = num(key, value)?,
        "adam_lr" => cfg.pretrain.adam.lr = num(key, value)?,
        "conv1_filters" => cfg.cnn.conv1_filters = num(key, value)?,
        "conv2_filters" => cfg.cnn.conv2_filters = num(key, value)?,
        "hidden" => cfg.cnn.hidden = num(key, value)?,
        "dropout_prob" => cfg.cnn.dropout_prob = num(key, value)?,
        "stages" => {
            let names: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if let Some(bad) = names.iter().find(|n| !["pretrain", "cst", "finetune"].contains(n)) {
                return Err(format!("unknown stage `{bad}`"));
            }
            cfg.stages.pretrain = names.contains(&"pretrain");
            cfg.stages.cst = names.contains(&"cst");
            cfg.stages.finetune = names.contains(&"finetune");
        }
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_then_parse_is_identity() {
        let mut cfg = PipelineConfig::default();
        cfg.train.lambda = 0.25;
        cfg.train.mode = Relaxation::Hard;
        cfg.stages.finetune = false;
        cfg.cnn.hidden = 64;
        let back = parse_config(&render_config(&cfg), &PipelineConfig::default()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(render_config(&cfg).lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = parse_config("# a comment\n\neta_cst = 0.1  # trailing\n", &PipelineConfig::default()).unwrap();
        assert_eq!(cfg.train.eta_cst, 0.1);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_config("lambda = 1\nlearning_rate = 3\n", &PipelineConfig::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_config("lambda = -1\n", &PipelineConfig::default()).is_err());
        assert!(parse_config("mode = fuzzy\n", &PipelineConfig::default()).is_err());
        assert!(parse_config("dropout_prob = 1.0\n", &PipelineConfig::default()).is_err());
    }
}
