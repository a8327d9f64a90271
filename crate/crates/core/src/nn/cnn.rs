//! Per-glyph convolutional classifier: two 3×3 conv + ReLU + 2×2 max-pool
//! blocks, a dense ReLU layer with dropout, and a 12-way softmax.
//!
//! Activations are laid out channel-major over the whole batch
//! (`channels × (batch · height · width)`) so each convolution is a single
//! matrix product against an im2col buffer.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::gemm::gemm;
use super::tensor::Tensor;
use crate::features::ProbRow;
use crate::glyph::{GlyphImage, PIXELS, SIDE};
use crate::symbol::{Symbol, NUM_SYMBOLS};
use crate::{ContractError, NnError};

const TAPS: usize = 9;
const SIDE1: usize = SIDE.div_ceil(2);
const SIDE2: usize = SIDE1.div_ceil(2);
const AREA0: usize = PIXELS;
const AREA1: usize = SIDE1 * SIDE1;
const AREA2: usize = SIDE2 * SIDE2;

/// Parameter names, in checkpoint and iteration order.
pub const PARAM_NAMES: [&str; 8] =
    ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense.weight", "dense.bias", "output.weight", "output.bias"];

/// Layer widths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CnnConfig {
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden: usize,
    pub dropout_prob: f64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig { conv1_filters: 16, conv2_filters: 32, hidden: 128, dropout_prob: 0.5 }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<(), ContractError> {
        if self.conv1_filters == 0 || self.conv2_filters == 0 || self.hidden == 0 {
            return Err(ContractError::Shape("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(ContractError::Shape(format!("dropout_prob {} outside [0, 1)", self.dropout_prob)));
        }
        Ok(())
    }

    fn flat(&self) -> usize {
        self.conv2_filters * AREA2
    }
}

/// Network weights. Also used as the gradient container, since gradients
/// have the same shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
    pub output_weight: Tensor,
    pub output_bias: Tensor,
    pub dropout_prob: f64,
}

impl CnnParams {
    pub fn zeros(config: &CnnConfig) -> CnnParams {
        let (c1, c2, h) = (config.conv1_filters, config.conv2_filters, config.hidden);
        CnnParams {
            conv1_weight: Tensor::zeros(&[c1, 1, 3, 3]),
            conv1_bias: Tensor::zeros(&[c1]),
            conv2_weight: Tensor::zeros(&[c2, c1, 3, 3]),
            conv2_bias: Tensor::zeros(&[c2]),
            dense_weight: Tensor::zeros(&[h, config.flat()]),
            dense_bias: Tensor::zeros(&[h]),
            output_weight: Tensor::zeros(&[NUM_SYMBOLS, h]),
            output_bias: Tensor::zeros(&[NUM_SYMBOLS]),
            dropout_prob: config.dropout_prob,
        }
    }

    /// He initialization: weights drawn from `N(0, 2 / fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(config: &CnnConfig, rng: &mut R) -> CnnParams {
        let mut p = CnnParams::zeros(config);
        for t in [&mut p.conv1_weight, &mut p.conv2_weight, &mut p.dense_weight, &mut p.output_weight] {
            let fan_in: usize = t.shape()[1..].iter().product();
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in t.data_mut() {
                *v = normal.sample(rng);
            }
        }
        p
    }

    /// Zero tensors with this model's shapes.
    pub fn zeros_like(&self) -> CnnParams {
        CnnParams::zeros(&self.config())
    }

    pub fn config(&self) -> CnnConfig {
        CnnConfig {
            conv1_filters: self.conv1_bias.len(),
            conv2_filters: self.conv2_bias.len(),
            hidden: self.dense_bias.len(),
            dropout_prob: self.dropout_prob,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv1_weight,
            &self.conv1_bias,
            &self.conv2_weight,
            &self.conv2_bias,
            &self.dense_weight,
            &self.dense_bias,
            &self.output_weight,
            &self.output_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_weight,
            &mut self.conv1_bias,
            &mut self.conv2_weight,
            &mut self.conv2_bias,
            &mut self.dense_weight,
            &mut self.dense_bias,
            &mut self.output_weight,
            &mut self.output_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Checks that the tensor shapes fit together and match the fixed input size.
    pub fn check_shapes(&self) -> Result<(), ContractError> {
        let cfg = self.config();
        cfg.validate()?;
        let expected = CnnParams::zeros(&cfg);
        for ((name, got), want) in PARAM_NAMES.iter().zip(self.tensors()).zip(expected.tensors()) {
            if got.shape() != want.shape() {
                return Err(ContractError::Shape(format!("{name}: expected {:?}, found {:?}", want.shape(), got.shape())));
            }
        }
        Ok(())
    }
}

/// Forward-pass mode. Training applies inverted dropout drawn from the rng.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    cols1: Vec<f64>,
    act1: Vec<f64>,
    arg1: Vec<u32>,
    cols2: Vec<f64>,
    act2: Vec<f64>,
    arg2: Vec<u32>,
    flat: Vec<f64>,
    hidden: Vec<f64>,
    mask: Option<Vec<f64>>,
    dropped: Vec<f64>,
    logits: Vec<ProbRow>,
    probs: Vec<ProbRow>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.batch
    }

    pub fn probs(&self) -> &[ProbRow] {
        &self.probs
    }

    pub fn logits(&self) -> &[ProbRow] {
        &self.logits
    }

    /// True when both passes took the same piecewise-linear branch: identical
    /// ReLU activity, dropout masks, and pooling winners. Finite differences
    /// are only meaningful between such passes.
    pub fn same_branches(&self, other: &ForwardCache) -> bool {
        let active = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0));
        self.arg1 == other.arg1
            && self.arg2 == other.arg2
            && self.mask == other.mask
            && active(&self.act1, &other.act1)
            && active(&self.act2, &other.act2)
            && active(&self.hidden, &other.hidden)
    }

    /// Per-image cross-entropy `-ln P[label]`, computed from the logits.
    pub fn cross_entropy(&self, labels: &[Symbol]) -> Result<Vec<f64>, ContractError> {
        if labels.len() != self.batch {
            return Err(ContractError::LengthMismatch { expected: self.batch, found: labels.len() });
        }
        Ok(self.logits.iter().zip(labels).map(|(z, s)| log_sum_exp(z) - z[s.index()]).collect())
    }
}

/// Gradient arriving at the network output.
#[derive(Clone, Copy, Debug)]
pub enum Upstream<'a> {
    /// `∂L/∂P`, one row per image.
    Probs(&'a [ProbRow]),
    /// `∂L/∂z` for the pre-softmax logits.
    Logits(&'a [ProbRow]),
}

/// Single-image forward pass.
pub fn cnn_forward(params: &CnnParams, image: &GlyphImage, mode: Mode<'_>) -> Result<(ProbRow, ForwardCache), NnError> {
    let cache = forward_batch(params, &[image], mode)?;
    Ok((cache.probs[0], cache))
}

/// Batched forward pass.
pub fn forward_batch(params: &CnnParams, images: &[&GlyphImage], mode: Mode<'_>) -> Result<ForwardCache, NnError> {
    params.check_shapes()?;
    let cfg = params.config();
    let (c1, c2, hid) = (cfg.conv1_filters, cfg.conv2_filters, cfg.hidden);
    let n = images.len();
    if n == 0 {
        return Err(ContractError::Empty.into());
    }

    let mut input = Vec::with_capacity(n * AREA0);
    for img in images {
        input.extend(img.pixels().iter().map(|&v| v as f64));
    }
    let cols1 = im2col(&input, 1, n, SIDE);
    let mut act1 = vec![0.0; c1 * n * AREA0];
    gemm(c1, TAPS, n * AREA0, params.conv1_weight.data(), false, &cols1, false, 0.0, &mut act1);
    bias_relu_rows(&mut act1, params.conv1_bias.data(), n * AREA0, "conv1")?;
    let (pool1, arg1) = max_pool(&act1, c1, n, SIDE);

    let cols2 = im2col(&pool1, c1, n, SIDE1);
    let mut act2 = vec![0.0; c2 * n * AREA1];
    gemm(c2, c1 * TAPS, n * AREA1, params.conv2_weight.data(), false, &cols2, false, 0.0, &mut act2);
    bias_relu_rows(&mut act2, params.conv2_bias.data(), n * AREA1, "conv2")?;
    let (pool2, arg2) = max_pool(&act2, c2, n, SIDE1);

    let f = cfg.flat();
    let mut flat = vec![0.0; n * f];
    for c in 0..c2 {
        for img in 0..n {
            let src = &pool2[c * n * AREA2 + img * AREA2..][..AREA2];
            flat[img * f + c * AREA2..][..AREA2].copy_from_slice(src);
        }
    }

    let mut hidden = vec![0.0; n * hid];
    gemm(n, f, hid, &flat, false, params.dense_weight.data(), true, 0.0, &mut hidden);
    for row in hidden.chunks_mut(hid) {
        for (v, b) in row.iter_mut().zip(params.dense_bias.data()) {
            *v += b;
        }
    }
    check_finite(&hidden, "dense")?;
    hidden.iter_mut().for_each(|v| *v = v.max(0.0));

    let (mask, dropped) = match mode {
        Mode::Eval => (None, hidden.clone()),
        Mode::Train(rng) => {
            let p = cfg.dropout_prob;
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..hidden.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
            let dropped = hidden.iter().zip(&mask).map(|(h, m)| h * m).collect();
            (Some(mask), dropped)
        }
    };

    let mut out = vec![0.0; n * NUM_SYMBOLS];
    gemm(n, hid, NUM_SYMBOLS, &dropped, false, params.output_weight.data(), true, 0.0, &mut out);
    let mut logits = Vec::with_capacity(n);
    for row in out.chunks(NUM_SYMBOLS) {
        let mut z = [0.0; NUM_SYMBOLS];
        for (k, v) in z.iter_mut().enumerate() {
            *v = row[k] + params.output_bias.data()[k];
        }
        logits.push(z);
    }
    check_finite(logits.as_flattened(), "output")?;
    let probs = logits.iter().map(softmax).collect();

    Ok(ForwardCache { batch: n, cols1, act1, arg1, cols2, act2, arg2, flat, hidden, mask, dropped, logits, probs })
}

/// Exact gradients of the loss whose upstream gradient is given, summed over the batch.
pub fn cnn_backward(params: &CnnParams, cache: &ForwardCache, upstream: Upstream<'_>) -> Result<CnnParams, NnError> {
    params.check_shapes()?;
    let cfg = params.config();
    let (c1, c2, hid, f) = (cfg.conv1_filters, cfg.conv2_filters, cfg.hidden, cfg.flat());
    let n = cache.batch;
    if cache.act1.len() != c1 * n * AREA0 || cache.hidden.len() != n * hid || cache.flat.len() != n * f {
        return Err(ContractError::Shape("forward cache does not match these parameters".into()).into());
    }
    let rows = match upstream {
        Upstream::Probs(g) | Upstream::Logits(g) => g,
    };
    if rows.len() != n {
        return Err(ContractError::LengthMismatch { expected: n, found: rows.len() }.into());
    }

    let mut dlogits = Vec::with_capacity(n * NUM_SYMBOLS);
    match upstream {
        Upstream::Logits(g) => g.iter().for_each(|r| dlogits.extend_from_slice(r)),
        Upstream::Probs(g) => {
            for (p, r) in cache.probs.iter().zip(g) {
                let inner: f64 = p.iter().zip(r).map(|(a, b)| a * b).sum();
                dlogits.extend(p.iter().zip(r).map(|(pk, gk)| pk * (gk - inner)));
            }
        }
    }

    let mut grads = params.zeros_like();
    gemm(NUM_SYMBOLS, n, hid, &dlogits, true, &cache.dropped, false, 0.0, grads.output_weight.data_mut());
    column_sums(&dlogits, NUM_SYMBOLS, grads.output_bias.data_mut());

    let mut dhidden = vec![0.0; n * hid];
    gemm(n, NUM_SYMBOLS, hid, &dlogits, false, params.output_weight.data(), false, 0.0, &mut dhidden);
    for (i, d) in dhidden.iter_mut().enumerate() {
        let m = cache.mask.as_ref().map_or(1.0, |m| m[i]);
        *d = if cache.hidden[i] > 0.0 { *d * m } else { 0.0 };
    }
    gemm(hid, n, f, &dhidden, true, &cache.flat, false, 0.0, grads.dense_weight.data_mut());
    column_sums(&dhidden, hid, grads.dense_bias.data_mut());

    let mut dflat = vec![0.0; n * f];
    gemm(n, hid, f, &dhidden, false, params.dense_weight.data(), false, 0.0, &mut dflat);
    let mut dpool2 = vec![0.0; c2 * n * AREA2];
    for c in 0..c2 {
        for img in 0..n {
            dpool2[c * n * AREA2 + img * AREA2..][..AREA2].copy_from_slice(&dflat[img * f + c * AREA2..][..AREA2]);
        }
    }
    let mut dact2 = unpool(&dpool2, &cache.arg2, cache.act2.len());
    relu_mask(&mut dact2, &cache.act2);
    gemm(c2, n * AREA1, c1 * TAPS, &dact2, false, &cache.cols2, true, 0.0, grads.conv2_weight.data_mut());
    row_sums(&dact2, n * AREA1, grads.conv2_bias.data_mut());

    let mut dcols2 = vec![0.0; c1 * TAPS * n * AREA1];
    gemm(c1 * TAPS, c2, n * AREA1, params.conv2_weight.data(), true, &dact2, false, 0.0, &mut dcols2);
    let dpool1 = col2im(&dcols2, c1, n, SIDE1);
    let mut dact1 = unpool(&dpool1, &cache.arg1, cache.act1.len());
    relu_mask(&mut dact1, &cache.act1);
    gemm(c1, n * AREA0, TAPS, &dact1, false, &cache.cols1, true, 0.0, grads.conv1_weight.data_mut());
    row_sums(&dact1, n * AREA0, grads.conv1_bias.data_mut());

    Ok(grads)
}

pub fn softmax(z: &ProbRow) -> ProbRow {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = z.map(|v| (v - max).exp());
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn log_sum_exp(z: &ProbRow) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_finite(values: &[f64], layer: &'static str) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite { layer })
    }
}

/// Adds a per-row bias, checks finiteness, then applies ReLU (which would
/// otherwise map NaN to zero).
fn bias_relu_rows(values: &mut [f64], bias: &[f64], row_len: usize, layer: &'static str) -> Result<(), NnError> {
    for (row, b) in values.chunks_mut(row_len).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
    check_finite(values, layer)?;
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(())
}

fn relu_mask(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn row_sums(values: &[f64], row_len: usize, out: &mut [f64]) {
    for (row, o) in values.chunks(row_len).zip(out) {
        *o = row.iter().sum();
    }
}

fn column_sums(values: &[f64], cols: usize, out: &mut [f64]) {
    for row in values.chunks(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// Unrolls 3×3 same-padded patches: row `(c, ky, kx)`, column `(image, y, x)`.
fn im2col(input: &[f64], channels: usize, n: usize, side: usize) -> Vec<f64> {
    let area = side * side;
    let width = n * area;
    let mut out = vec![0.0; channels * TAPS * width];
    for c in 0..channels {
        for tap in 0..TAPS {
            let (ky, kx) = (tap / 3, tap % 3);
            let row = &mut out[(c * TAPS + tap) * width..][..width];
            for img in 0..n {
                let src = &input[c * width + img * area..][..area];
                let dst = &mut row[img * area..][..area];
                for y in 0..side {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < side) else { continue };
                    for x in 0..side {
                        if let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < side) {
                            dst[y * side + x] = src[sy * side + sx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols: &[f64], channels: usize, n: usize, side: usize) -> Vec<f64> {
    let area = side * side;
    let width = n * area;
    let mut out = vec![0.0; channels * width];
    for c in 0..channels {
        for tap in 0..TAPS {
            let (ky, kx) = (tap / 3, tap % 3);
            let row = &cols[(c * TAPS + tap) * width..][..width];
            for img in 0..n {
                let src = &row[img * area..][..area];
                let dst = &mut out[c * width + img * area..][..area];
                for y in 0..side {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < side) else { continue };
                    for x in 0..side {
                        if let Some(sx) = (x + kx).checked_sub(1).filter(|&v| v < side) {
                            dst[sy * side + sx] += src[y * side + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2×2 max-pool with stride 2 and ceiling semantics. Returns the pooled
/// values and, for each, the flat input index of the (first) maximum.
fn max_pool(input: &[f64], channels: usize, n: usize, side: usize) -> (Vec<f64>, Vec<u32>) {
    let out_side = side.div_ceil(2);
    let (area, out_area) = (side * side, out_side * out_side);
    let mut values = Vec::with_capacity(channels * n * out_area);
    let mut argmax = Vec::with_capacity(channels * n * out_area);
    for plane in 0..channels * n {
        let base = plane * area;
        for py in 0..out_side {
            for px in 0..out_side {
                let mut best = base + 2 * py * side + 2 * px;
                for y in 2 * py..(2 * py + 2).min(side) {
                    for x in 2 * px..(2 * px + 2).min(side) {
                        let i = base + y * side + x;
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                values.push(input[best]);
                argmax.push(best as u32);
            }
        }
    }
    (values, argmax)
}

fn unpool(grad: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; input_len];
    for (g, &i) in grad.iter().zip(argmax) {
        out[i as usize] += g;
    }
    out
}
