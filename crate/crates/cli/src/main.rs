mod chain_file;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use nester::config::load_config;
use nester::dataset::{generate_dataset, load_dataset, save_dataset, DatasetBundle, DatasetConfig};
use nester::experiment::{evaluate, run_ablations, run_curves, CURVES_HEADER};
use nester::features::StructuredWeights;
use nester::glyph::NoiseConfig;
use nester::nn::{loss_record_csv, CnnParams};
use nester::solver::solve_map;
use nester::symbol::format_symbols;
use nester::training::{
    finetune_end_to_end, network_outputs, placeholder_outputs, pretrain_stage, stage_log_csv, train_cst, write_atomic, ModelKind,
    PipelineConfig, TrainedModel,
};
use nester::Error;

#[derive(Parser)]
#[command(name = "nester", version, about = "Constrained equation recognition experiments")]
struct Cli {
    /// Seed for data generation and every training stage (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` hyperparameter file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, logs and CSV output.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic equation dataset.
    GenData {
        #[arg(long, default_value_t = 8000)]
        train: usize,
        #[arg(long, default_value_t = 2000)]
        test: usize,
        #[arg(long, default_value_t = 20)]
        chunks: usize,
        /// Per-pixel flip probability.
        #[arg(long, default_value_t = 0.02)]
        flip: f64,
        /// Maximum glyph translation (0 or 1).
        #[arg(long, default_value_t = 1)]
        shift: u32,
        #[arg(long, default_value_t = 3)]
        max_digits: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the glyph classifier on one training chunk.
    Pretrain(ChunkArgs),
    /// Train the structured weights on top of a pretrained network.
    TrainCst {
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long, default_value = "combined")]
        model: ModelKind,
        #[arg(long)]
        cnn: PathBuf,
    },
    /// Fine-tune network and structured weights end to end.
    Finetune {
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long, default_value = "combined")]
        model: ModelKind,
        #[arg(long)]
        cnn: PathBuf,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Evaluate a trained model on the test set and print one CSV row.
    Evaluate {
        #[command(flatten)]
        chunk: ChunkArgs,
        #[arg(long, default_value = "combined")]
        model: ModelKind,
        /// Network checkpoint; unused by `cst`.
        #[arg(long)]
        cnn: Option<PathBuf>,
        /// Structured checkpoint; required by every constrained model except `distance-only`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Learning curves: every model on every chunk, appended to curves.csv.
    Curves {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "cnn,cst,combined")]
        models: Vec<ModelKind>,
        /// 1-based chunk indices; all chunks when omitted.
        #[arg(long, value_delimiter = ',')]
        chunks: Vec<usize>,
    },
    /// Ablation curves of the feature variants, appended to ablations.csv.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        chunks: Vec<usize>,
    },
    /// Solve a chain score read from CSV blocks and print the best valid sequence.
    Solve {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_digits: usize,
    },
}

#[derive(Args)]
struct ChunkArgs {
    #[arg(long)]
    data: PathBuf,
    /// 1-based training chunk; the largest when omitted.
    #[arg(long)]
    chunk: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration, 3 for data and checkpoint, 4 for numeric failures.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) => 2,
                Error::Dataset(nester::DatasetError::Config(_)) => 2,
                Error::Dataset(_) | Error::Checkpoint(_) | Error::Io(_) => 3,
                Error::Contract(_) | Error::Nn(_) | Error::Solve(_) => 4,
            };
        }
        if let Some(nester::DatasetError::Config(_)) = cause.downcast_ref::<nester::DatasetError>() {
            return 2;
        }
        if cause.is::<nester::DatasetError>() || cause.is::<nester::CheckpointError>() || cause.is::<std::io::Error>() {
            return 3;
        }
    }
    4
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path, &PipelineConfig::default())?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    let out_dir = cli.out_dir.as_path();
    match cli.command {
        Command::GenData { train, test, chunks, flip, shift, max_digits, out } => {
            let data_cfg = DatasetConfig {
                n_train: train,
                n_test: test,
                n_chunks: chunks,
                noise: NoiseConfig { flip_prob: flip, max_shift: shift },
                max_digits,
                seed: cfg.train.seed,
            };
            let bundle = generate_dataset(&data_cfg)?;
            save_dataset(&bundle, &out).with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} train / {} test sequences to {}", bundle.train.len(), bundle.test.len(), out.display());
        }
        Command::Pretrain(args) => {
            let (dataset, k) = open_chunk(&args)?;
            let chunk = dataset.chunk(k).expect("checked chunk");
            let (cnn, loss) = pretrain_stage(chunk, &cfg)?;
            std::fs::create_dir_all(out_dir)?;
            save(out_dir, "cnn_pretrain.ckpt", |f| Ok(cnn.write_to(f)?))?;
            save(out_dir, "pretrain_loss.csv", |f| Ok(f.write_all(loss_record_csv(&loss).as_bytes())?))?;
            eprintln!("pretrained on {} sequences, final loss {:?}", chunk.len(), loss.last());
        }
        Command::TrainCst { chunk: args, model, cnn } => {
            let (dataset, k) = open_chunk(&args)?;
            let chunk = dataset.chunk(k).expect("checked chunk");
            let mask = model.mask().ok_or_else(|| Error::Config(format!("`{model}` has no structured weights")))?;
            let mut weights = model.initial_weights();
            let mut records = Vec::new();
            if model.learns_structure() {
                let outputs = if model.uses_network() {
                    network_outputs(&load_cnn(&cnn)?, chunk, cfg.train.mode)?
                } else {
                    placeholder_outputs(chunk)
                };
                (weights, records) = train_cst(&weights, chunk, &outputs, &cfg.train, mask)?;
            }
            std::fs::create_dir_all(out_dir)?;
            save(out_dir, "cst.ckpt", |f| Ok(weights.write_to(f)?))?;
            save(out_dir, "stage_log_cst.csv", |f| Ok(f.write_all(stage_log_csv(&records).as_bytes())?))?;
            eprintln!("{model}: {} structured updates", records.len());
        }
        Command::Finetune { chunk: args, model, cnn, weights } => {
            let (dataset, k) = open_chunk(&args)?;
            let chunk = dataset.chunk(k).expect("checked chunk");
            let mask = model.mask().ok_or_else(|| Error::Config(format!("`{model}` has no structured weights")))?;
            if !model.finetunes() {
                return Err(Error::Config(format!("`{model}` is not fine-tuned end to end")).into());
            }
            // Step sizes continue the schedule of the preceding CST stage.
            let offset = chunk.len() * cfg.train.epochs_cst;
            let (cnn, weights, records) = finetune_end_to_end(&load_cnn(&cnn)?, &load_weights(&weights)?, chunk, &cfg.train, mask, offset)?;
            std::fs::create_dir_all(out_dir)?;
            save(out_dir, "cnn_finetune.ckpt", |f| Ok(cnn.write_to(f)?))?;
            save(out_dir, "cst_finetune.ckpt", |f| Ok(weights.write_to(f)?))?;
            save(out_dir, "stage_log_finetune.csv", |f| Ok(f.write_all(stage_log_csv(&records).as_bytes())?))?;
            eprintln!("{model}: {} fine-tuning steps", records.len());
        }
        Command::Evaluate { chunk: args, model, cnn, weights } => {
            let (dataset, k) = open_chunk(&args)?;
            let cnn = match (cnn, model.uses_network()) {
                (Some(path), _) => load_cnn(&path)?,
                (None, false) => CnnParams::zeros(&cfg.cnn),
                (None, true) => return Err(Error::Config(format!("`{model}` needs --cnn")).into()),
            };
            let weights = match (weights, model) {
                (_, ModelKind::Cnn) => None,
                (Some(path), _) => Some(load_weights(&path)?),
                (None, ModelKind::DistanceOnly) => Some(model.initial_weights()),
                (None, _) => return Err(Error::Config(format!("`{model}` needs --weights")).into()),
            };
            let trained = TrainedModel { kind: model, cnn, weights };
            let report = evaluate(&trained, &dataset.test, dataset.chunk_sizes[k], cfg.train.mode, cfg.train.max_digits)?;
            println!("{CURVES_HEADER}\n{}", report.csv_row());
        }
        Command::Curves { data, models, chunks } => {
            let dataset = open_dataset(&data)?;
            let chunks = chunk_indices(&dataset, &chunks)?;
            std::fs::create_dir_all(out_dir)?;
            let path = out_dir.join("curves.csv");
            let rows = run_curves(&dataset, &cfg, &models, &chunks, Some(&path))?;
            eprintln!("{} new rows in {}", rows.len(), path.display());
        }
        Command::Ablate { data, chunks } => {
            let dataset = open_dataset(&data)?;
            let chunks = chunk_indices(&dataset, &chunks)?;
            std::fs::create_dir_all(out_dir)?;
            let path = out_dir.join("ablations.csv");
            let rows = run_ablations(&dataset, &cfg, &chunks, Some(&path))?;
            eprintln!("{} new rows in {}", rows.len(), path.display());
        }
        Command::Solve { chain, max_digits } => {
            let text = std::fs::read_to_string(&chain).with_context(|| format!("reading {}", chain.display()))?;
            let solution = solve_map(&chain_file::parse_chain(&text)?, max_digits)?;
            println!("{}\t{}", format_symbols(&solution.sequence), solution.score);
        }
    }
    Ok(())
}

fn open_dataset(path: &Path) -> anyhow::Result<DatasetBundle> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

/// Loads the dataset and resolves the 1-based chunk option to a 0-based index.
fn open_chunk(args: &ChunkArgs) -> anyhow::Result<(DatasetBundle, usize)> {
    let dataset = open_dataset(&args.data)?;
    let k = match args.chunk {
        Some(c) => chunk_indices(&dataset, &[c])?[0],
        None => dataset.chunk_sizes.len().checked_sub(1).ok_or_else(|| Error::Config("dataset has no chunks".into()))?,
    };
    Ok((dataset, k))
}

fn chunk_indices(dataset: &DatasetBundle, chunks: &[usize]) -> nester::Result<Vec<usize>> {
    let n = dataset.chunk_sizes.len();
    if chunks.is_empty() {
        return Ok((0..n).collect());
    }
    chunks
        .iter()
        .map(|&c| match c {
            1.. if c <= n => Ok(c - 1),
            _ => Err(Error::Config(format!("chunk {c} outside 1..={n}"))),
        })
        .collect()
}

fn load_cnn(path: &Path) -> anyhow::Result<CnnParams> {
    CnnParams::load(path).with_context(|| format!("loading {}", path.display()))
}

fn load_weights(path: &Path) -> anyhow::Result<StructuredWeights> {
    StructuredWeights::load(path).with_context(|| format!("loading {}", path.display()))
}

fn save(dir: &Path, name: &str, write: impl FnOnce(&mut std::fs::File) -> nester::Result<()>) -> anyhow::Result<()> {
    let path = dir.join(name);
    write_atomic(&path, write).with_context(|| format!("writing {}", path.display()))
}
