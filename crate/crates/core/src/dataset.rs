//! Synthetic `a+b=c` equation datasets.
//!
//! Every sample is generated from its own ChaCha stream (stream id = sample
//! index, train samples first), so generation is a pure function of the
//! configuration and the seed and any subset can be regenerated alone.
//!
//! File format, one record per line after two header lines:
//!
//! ```text
//! #nester-dataset v1 seed=<seed>
//! #meta train=<n> test=<n> chunks=<s1>,<s2>,...
//! <split>\t<label string>\t<81·m chars of 0/1>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::glyph::{render_glyph, GlyphImage, NoiseConfig, PIXELS};
use crate::solver::{validate, Validity};
use crate::symbol::{format_symbols, parse_symbols, Symbol};
use crate::DatasetError;

const MAGIC: &str = "#nester-dataset";
const VERSION: &str = "v1";

/// Shortest and longest valid sequences with up to three digits per number.
pub const MIN_LEN: usize = 5;
pub const MAX_LEN: usize = 11;

/// An image sequence with its gold labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EquationSample {
    pub images: Vec<GlyphImage>,
    pub labels: Vec<Symbol>,
}

impl EquationSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks the structural invariants; the error string names the problem.
    pub fn check(&self) -> Result<(), String> {
        if self.images.len() != self.labels.len() {
            return Err(format!("{} images for {} labels", self.images.len(), self.labels.len()));
        }
        if !(MIN_LEN..=MAX_LEN).contains(&self.len()) {
            return Err(format!("length {} outside {MIN_LEN}..={MAX_LEN}", self.len()));
        }
        match validate(&self.labels) {
            Validity::Valid => Ok(()),
            v => Err(format!("labels `{}` are not a valid equation ({v:?})", format_symbols(&self.labels))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_chunks: usize,
    pub noise: NoiseConfig,
    pub max_digits: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_train: 8000, n_test: 2000, n_chunks: 20, noise: NoiseConfig::default(), max_digits: 3, seed: 0 }
    }
}

/// Train/test split plus the nested chunk schedule over the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub train: Vec<EquationSample>,
    pub test: Vec<EquationSample>,
    pub seed: u64,
    pub chunk_sizes: Vec<usize>,
}

impl DatasetBundle {
    /// The `k`-th training chunk (0-based): a prefix of the training set.
    pub fn chunk(&self, k: usize) -> Option<&[EquationSample]> {
        self.chunk_sizes.get(k).map(|&n| &self.train[..n])
    }
}

/// Rejection rule of [`sample_equation`]: accepts `(a, b)` when `a + b` still
/// fits in `max_digits` digits.
pub fn accept_pair(a: u64, b: u64, max_digits: usize) -> Option<(u64, u64, u64)> {
    let c = a + b;
    (c < 10u64.pow(max_digits as u32)).then_some((a, b, c))
}

/// Draws `a, b` uniformly from `[1, 10^max_digits - 1]` until their sum fits.
pub fn sample_equation<R: Rng + ?Sized>(max_digits: usize, rng: &mut R) -> (u64, u64, u64) {
    assert!(max_digits >= 1, "max_digits must be positive");
    let hi = 10u64.pow(max_digits as u32);
    loop {
        let a = rng.random_range(1..hi);
        let b = rng.random_range(1..hi);
        if let Some(t) = accept_pair(a, b, max_digits) {
            return t;
        }
    }
}

/// Label sequence `a+b=c` without leading zeros.
pub fn equation_labels(a: u64, b: u64, c: u64) -> Vec<Symbol> {
    parse_symbols(&format!("{a}+{b}={c}")).expect("decimal digits and operators only")
}

/// Renders one sample from its own stream.
pub fn generate_sample(seed: u64, index: u64, max_digits: usize, noise: &NoiseConfig) -> Result<EquationSample, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (a, b, c) = sample_equation(max_digits, &mut rng);
    let labels = equation_labels(a, b, c);
    let images = labels.iter().map(|s| render_glyph(s.id(), noise, &mut rng)).collect::<Result<_, _>>()?;
    Ok(EquationSample { images, labels })
}

/// Linear nested schedule `[n/k, 2n/k, ..., n]`.
pub fn chunk_schedule(n_train: usize, n_chunks: usize) -> Result<Vec<usize>, DatasetError> {
    if n_chunks == 0 || n_train == 0 || !n_train.is_multiple_of(n_chunks) {
        return Err(DatasetError::Config(format!("{n_train} training samples cannot be split into {n_chunks} equal chunks")));
    }
    let step = n_train / n_chunks;
    Ok((1..=n_chunks).map(|k| k * step).collect())
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<DatasetBundle, DatasetError> {
    let chunk_sizes = chunk_schedule(config.n_train, config.n_chunks)?;
    config.noise.validate()?;
    if !(1..=3).contains(&config.max_digits) {
        return Err(DatasetError::Config(format!("max_digits {} outside 1..=3", config.max_digits)));
    }
    let gen = |i: usize| generate_sample(config.seed, i as u64, config.max_digits, &config.noise);
    let train = (0..config.n_train).map(gen).collect::<Result<_, _>>()?;
    let test = (config.n_train..config.n_train + config.n_test).map(gen).collect::<Result<_, _>>()?;
    Ok(DatasetBundle { train, test, seed: config.seed, chunk_sizes })
}

pub fn write_dataset<W: Write>(bundle: &DatasetBundle, mut w: W) -> Result<(), DatasetError> {
    writeln!(w, "{MAGIC} {VERSION} seed={}", bundle.seed)?;
    let chunks: Vec<String> = bundle.chunk_sizes.iter().map(|c| c.to_string()).collect();
    writeln!(w, "#meta train={} test={} chunks={}", bundle.train.len(), bundle.test.len(), chunks.join(","))?;
    let mut bits = String::new();
    for (split, samples) in [("train", &bundle.train), ("test", &bundle.test)] {
        for s in samples.iter() {
            bits.clear();
            for img in &s.images {
                bits.extend(img.pixels().iter().map(|&p| if p == 1 { '1' } else { '0' }));
            }
            writeln!(w, "{split}\t{}\t{bits}", format_symbols(&s.labels))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    write_dataset(bundle, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<DatasetBundle, DatasetError> {
    read_dataset(BufReader::new(File::open(path)?))
}

fn parse_err(line: usize, msg: impl Into<String>) -> DatasetError {
    DatasetError::Parse { line, msg: msg.into() }
}

fn key_value<'a>(token: &'a str, key: &str, line: usize) -> Result<&'a str, DatasetError> {
    token
        .strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| parse_err(line, format!("expected `{key}=...`, found `{token}`")))
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, DatasetError> {
    s.parse().map_err(|_| parse_err(line, format!("invalid number `{s}`")))
}

/// Parses a dataset; nothing is returned unless the whole input is valid.
pub fn read_dataset<R: BufRead>(r: R) -> Result<DatasetBundle, DatasetError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| parse_err(1, "empty file"))??;
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(parse_err(1, "missing `#nester-dataset` header"));
    }
    match tokens.next() {
        Some(VERSION) => {}
        other => return Err(DatasetError::Version(other.unwrap_or("").to_string())),
    }
    let seed: u64 = parse_num(key_value(tokens.next().unwrap_or(""), "seed", 1)?, 1)?;

    let meta = lines.next().ok_or_else(|| parse_err(2, "missing `#meta` line"))??;
    let mut tokens = meta.split_whitespace();
    if tokens.next() != Some("#meta") {
        return Err(parse_err(2, "missing `#meta` line"));
    }
    let n_train: usize = parse_num(key_value(tokens.next().unwrap_or(""), "train", 2)?, 2)?;
    let n_test: usize = parse_num(key_value(tokens.next().unwrap_or(""), "test", 2)?, 2)?;
    let chunk_sizes = key_value(tokens.next().unwrap_or(""), "chunks", 2)?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(s, 2))
        .collect::<Result<Vec<usize>, _>>()?;
    if chunk_sizes.windows(2).any(|w| w[0] >= w[1]) || chunk_sizes.last().is_some_and(|&l| l != n_train) {
        return Err(parse_err(2, "chunk sizes must increase strictly and end at the training set size"));
    }

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    let mut line_no = 2;
    for line in lines {
        let line = line?;
        line_no += 1;
        if line.is_empty() {
            continue;
        }
        let index = train.len() + test.len();
        let mut fields = line.split('\t');
        let (Some(split), Some(label), Some(bits), None) = (fields.next(), fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(line_no, "expected three tab-separated fields"));
        };
        let labels = parse_symbols(label).ok_or_else(|| parse_err(line_no, format!("invalid label string `{label}`")))?;
        if bits.len() != labels.len() * PIXELS {
            return Err(parse_err(line_no, format!("expected {} pixel characters, found {}", labels.len() * PIXELS, bits.len())));
        }
        let mut images = Vec::with_capacity(labels.len());
        for chunk in bits.as_bytes().chunks(PIXELS) {
            let mut values = [0u8; PIXELS];
            for (v, &ch) in values.iter_mut().zip(chunk) {
                if !ch.is_ascii_digit() {
                    return Err(parse_err(line_no, format!("invalid pixel character `{}`", ch as char)));
                }
                *v = ch - b'0';
            }
            let img = GlyphImage::from_pixels(&values).map_err(|k| DatasetError::Validation {
                index,
                msg: format!("pixel {k} of image {} has value {}", images.len(), values[k]),
            })?;
            images.push(img);
        }
        let sample = EquationSample { images, labels };
        sample.check().map_err(|msg| DatasetError::Validation { index, msg })?;
        match split {
            "train" if test.is_empty() => train.push(sample),
            "test" => test.push(sample),
            "train" => return Err(parse_err(line_no, "train record after test records")),
            other => return Err(parse_err(line_no, format!("unknown split `{other}`"))),
        }
    }
    if train.len() != n_train || test.len() != n_test {
        return Err(parse_err(
            line_no,
            format!("truncated: expected {n_train} train and {n_test} test records, found {} and {}", train.len(), test.len()),
        ));
    }
    Ok(DatasetBundle { train, test, seed, chunk_sizes })
}
