use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.005,
        }
    }
}

/// Adam moments for a fixed, ordered list of parameter matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let first_moment: Vec<Matrix> = shapes
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        let second_moment = first_moment.clone();
        Self {
            config,
            step: 0,
            first_moment,
            second_moment,
        }
    }
}

/// One AdamW update over parallel slices of parameters and gradients.
///
/// Decay is decoupled: `w ← w·(1 − lr·wd)` first, then the bias-corrected
/// Adam step. Every gradient is checked before anything is modified, so a
/// non-finite gradient leaves parameters and state untouched.
pub fn adamw_step(
    state: &mut OptimizerState,
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    names: &[&str],
) -> Result<()> {
    let n = state.first_moment.len();
    if params.len() != n || grads.len() != n || names.len() != n {
        return Err(Error::invalid(format!(
            "adamw_step: {} params, {} grads, {} names for {} optimizer slots",
            params.len(),
            grads.len(),
            names.len(),
            n
        )));
    }
    for i in 0..n {
        if params[i].shape() != grads[i].shape() || params[i].shape() != state.first_moment[i].shape()
        {
            return Err(Error::DimensionMismatch {
                op: "adamw_step",
                left: params[i].shape(),
                right: grads[i].shape(),
            });
        }
        if !grads[i].is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", names[i])));
        }
    }

    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    for i in 0..n {
        let w = params[i].as_mut_slice();
        let g = grads[i].as_slice();
        let m = state.first_moment[i].as_mut_slice();
        let v = state.second_moment[i].as_mut_slice();
        for j in 0..w.len() {
            w[j] *= decay;
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Matrix {
        Matrix::from_rows(&[[x]])
    }

    fn step(cfg: AdamWConfig, w: f64, g: f64) -> f64 {
        let mut state = OptimizerState::new(cfg, [(1, 1)]);
        let mut p = one(w);
        adamw_step(&mut state, &mut [&mut p], &[&one(g)], &["w"]).unwrap();
        p[(0, 0)]
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        assert_eq!(step(cfg, 0.75, 0.0), 0.75);
    }

    #[test]
    fn first_step_hand_value() {
        let w = step(AdamWConfig::default(), 1.0, 1.0);
        // (1 − 1e-3·0.005) − 1e-3 · 1/(1 + 1e-8)
        assert!((w - 0.998995).abs() < 1e-9, "{w}");
    }

    #[test]
    fn pure_decay_is_linear_in_params() {
        let cfg = AdamWConfig::default();
        let w1 = step(cfg, 1.0, 0.0);
        assert_eq!(w1, 1.0 - 5e-6);
        let w2 = step(cfg, 2.0, 0.0);
        assert_eq!(w2, 2.0 * w1);
    }

    #[test]
    fn zero_decay_matches_plain_adam_over_several_steps() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            lr: 0.01,
            ..Default::default()
        };
        let grads = [0.3, -1.2, 0.05, 2.0];
        let mut state = OptimizerState::new(cfg, [(1, 1)]);
        let mut p = one(0.5);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adamw_step(&mut state, &mut [&mut p], &[&one(g)], &["w"]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            w -= 0.01 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((p[(0, 0)] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut state = OptimizerState::new(AdamWConfig::default(), [(1, 1), (1, 1)]);
        let (mut a, mut b) = (one(1.0), one(2.0));
        let err = adamw_step(
            &mut state,
            &mut [&mut a, &mut b],
            &[&one(0.1), &one(f64::NAN)],
            &["embed", "unembed"],
        )
        .unwrap_err();
        assert!(err.to_string().contains("unembed"), "{err}");
        assert_eq!(a[(0, 0)], 1.0);
        assert_eq!(state.step, 0);
    }
}
