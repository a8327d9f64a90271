use super::cnn::{CnnParams, PARAM_NAMES};
use crate::{ContractError, NnError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a fixed list of parameter buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    /// Fresh state for buffers of the given lengths.
    pub fn with_lengths(lengths: &[usize], config: AdamConfig) -> AdamState {
        AdamState { config, m: lengths.iter().map(|&n| vec![0.0; n]).collect(), v: lengths.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    /// Fresh state shaped like `params`.
    pub fn new(params: &CnnParams, config: AdamConfig) -> AdamState {
        let lengths: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        AdamState::with_lengths(&lengths, config)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update over raw buffers. Gradients are checked
    /// for finiteness before anything is modified.
    pub fn step_buffers(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], names: &[&'static str]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ContractError::LengthMismatch { expected: self.m.len(), found: params.len().min(grads.len()) }.into());
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(ContractError::LengthMismatch { expected: self.m[i].len(), found: g.len() }.into());
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFiniteGradient { param: names.get(i).copied().unwrap_or("parameter") });
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (j, (pj, &gj)) in p.iter_mut().zip(g.iter()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = beta1 * *m + (1.0 - beta1) * gj;
                *v = beta2 * *v + (1.0 - beta2) * gj * gj;
                *pj -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam update of every network parameter.
pub fn adam_step(params: &mut CnnParams, grads: &CnnParams, state: &mut AdamState) -> Result<(), NnError> {
    let grad_slices: Vec<&[f64]> = grads.tensors().iter().map(|t| t.data()).collect();
    let mut param_slices: Vec<&mut [f64]> = params.tensors_mut().into_iter().map(|t| t.data_mut()).collect();
    state.step_buffers(&mut param_slices, &grad_slices, &PARAM_NAMES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cnn::CnnConfig;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = CnnConfig { conv1_filters: 2, conv2_filters: 2, hidden: 3, dropout_prob: 0.5 };
        let mut p = CnnParams::zeros(&cfg);
        p.dense_weight.data_mut()[0] = 0.7;
        let before = p.clone();
        let mut state = AdamState::new(&p, AdamConfig::default());
        adam_step(&mut p, &before.zeros_like(), &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::with_lengths(&[3], cfg);
        let mut w = vec![0.0; 3];
        let g = [2.5, -0.01, 1e3];
        state.step_buffers(&mut [&mut w], &[&g], &["w"]).unwrap();
        for (wi, gi) in w.iter().zip(g) {
            // m̂ = g, v̂ = g² after bias correction.
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((wi - expected).abs() < 1e-15);
            assert!((wi + cfg.lr * gi.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_bowl_converges_like_the_scalar_recurrence() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut state = AdamState::with_lengths(&[2], cfg);
        let mut w = vec![1.0, 1.0];
        for _ in 0..200 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            state.step_buffers(&mut [&mut w], &[&g], &["w"]).unwrap();
        }
        // Independent scalar recurrence for one coordinate.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        }
        assert!((w[0] - x).abs() < 1e-12 && (w[1] - x).abs() < 1e-12);
        assert!(w.iter().map(|x| x * x).sum::<f64>().sqrt() < 0.05);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut state = AdamState::with_lengths(&[2], AdamConfig::default());
        let mut w = vec![1.0, 2.0];
        let err = state.step_buffers(&mut [&mut w], &[&[0.1, f64::NAN]], &["w"]).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient { param: "w" }));
        assert_eq!(w, vec![1.0, 2.0]);
        assert_eq!(state.steps(), 0);
    }
}
