//! Central finite differences for checking analytic gradients.
//!
//! The network is piecewise smooth (ReLU, max-pool), so a difference quotient
//! only approximates the derivative when both probes stay on the branch of the
//! base point. [`cnn_partial`] checks this and declines otherwise.

use rand::Rng;

use crate::features::StructuredWeights;
use crate::glyph::GlyphImage;
use crate::nn::{cnn_backward, forward_batch, CnnParams, ForwardCache, Mode, Upstream, PARAM_NAMES};
use crate::symbol::Symbol;
use crate::training::{margin_grad_wrt_probs, soft_margin};
use crate::Result;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from turning rounding noise into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(L(θ + h) - L(θ - h)) / 2h` along coordinate `index` of tensor `tensor`
/// (in [`CnnParams::tensors`] order), where `L = loss(forward(θ))`.
///
/// Returns `None` when either probe changes a ReLU or pooling decision
/// relative to the base pass.
pub fn cnn_partial(
    params: &CnnParams,
    tensor: usize,
    index: usize,
    h: f64,
    forward: impl Fn(&CnnParams) -> ForwardCache,
    loss: impl Fn(&CnnParams, &ForwardCache) -> f64,
) -> Option<f64> {
    let base = forward(params);
    let mut p = params.clone();
    let x = p.tensors()[tensor].data()[index];
    p.tensors_mut()[tensor].data_mut()[index] = x + h;
    let plus_cache = forward(&p);
    let plus = loss(&p, &plus_cache);
    p.tensors_mut()[tensor].data_mut()[index] = x - h;
    let minus_cache = forward(&p);
    let minus = loss(&p, &minus_cache);
    (base.same_branches(&plus_cache) && base.same_branches(&minus_cache)).then(|| (plus - minus) / (2.0 * h))
}

/// Outcome of checking sampled coordinates against finite differences.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because a probe crossed a ReLU or pooling boundary.
    pub declined: usize,
    pub max_rel_error: f64,
    /// Tensors with fewer smooth coordinates than requested, e.g. when one
    /// pre-activation near zero reacts to every entry of a bias.
    pub starved: Vec<String>,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.declined += other.declined;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.starved.extend(other.starved);
        self.failures.extend(other.failures);
    }
}

/// Compares `analytic` with central differences on `per_tensor` random
/// coordinates of every parameter tensor that lie on a smooth branch.
#[allow(clippy::too_many_arguments)]
pub fn check_cnn_layers<R: Rng + ?Sized>(
    params: &CnnParams,
    analytic: &CnnParams,
    per_tensor: usize,
    h: f64,
    tol: f64,
    floor: f64,
    rng: &mut R,
    forward: impl Fn(&CnnParams) -> ForwardCache,
    loss: impl Fn(&CnnParams, &ForwardCache) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for (t, name) in PARAM_NAMES.iter().enumerate() {
        let len = params.tensors()[t].len();
        let mut done = 0;
        for _ in 0..per_tensor * 10 {
            if done == per_tensor {
                break;
            }
            let i = rng.random_range(0..len);
            let Some(n) = cnn_partial(params, t, i, h, &forward, &loss) else {
                report.declined += 1;
                continue;
            };
            done += 1;
            report.checked += 1;
            let a = analytic.tensors()[t].data()[i];
            let err = relative_error(a, n, floor);
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= tol {
                report.failures.push(format!("{name}[{i}]: analytic {a:e}, numeric {n:e}, relative error {err:e}"));
            }
        }
        if done < per_tensor {
            report.starved.push(format!("{name}: only {done} of {per_tensor} coordinates lay on a smooth branch"));
        }
    }
    report
}

/// Central difference of a function of a plain vector along coordinate `index`.
/// Checks the gradient of the soft structured margin with respect to every
/// network tensor, with the rival `y_star` held fixed: the structured
/// gradient is pushed through the softmax and the whole network.
#[allow(clippy::too_many_arguments)]
pub fn check_soft_margin<R: Rng + ?Sized>(
    params: &CnnParams,
    weights: &StructuredWeights,
    x: &[GlyphImage],
    gold: &[Symbol],
    y_star: &[Symbol],
    per_tensor: usize,
    h: f64,
    tol: f64,
    floor: f64,
    rng: &mut R,
) -> Result<GradCheckReport> {
    let refs: Vec<&GlyphImage> = x.iter().collect();
    let forward = |p: &CnnParams| forward_batch(p, &refs, Mode::Eval).expect("forward pass of checked network");
    let cache = forward_batch(params, &refs, Mode::Eval)?;
    soft_margin(weights, x, cache.probs(), gold, y_star)?;
    let dp = margin_grad_wrt_probs(weights, x, y_star, gold)?;
    let analytic = cnn_backward(params, &cache, Upstream::Probs(&dp))?;
    let loss = |_: &CnnParams, c: &ForwardCache| soft_margin(weights, x, c.probs(), gold, y_star).expect("shapes checked above");
    Ok(check_cnn_layers(params, &analytic, per_tensor, h, tol, floor, rng, forward, loss))
}

pub fn vec_partial(x: &[f64], index: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut y = x.to_vec();
    y[index] = x[index] + h;
    let plus = f(&y);
    y[index] = x[index] - h;
    let minus = f(&y);
    (plus - minus) / (2.0 * h)
}
