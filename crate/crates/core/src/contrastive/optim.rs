use serde::{Deserialize, Serialize};

use crate::encoder::{Gradients, Parameters};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// First and second moments per parameter tensor plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &Parameters) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn check_congruent(&self, params: &Parameters) -> Result<()> {
        let ok = self.first.len() == params.tensors().len()
            && self
                .first
                .iter()
                .zip(params.tensors())
                .all(|(m, t)| m.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                name: "optimizer moments".into(),
            })
        }
    }
}

/// One AdamW step on a flat slice at (1-based) step `t`.
pub fn step_raw(
    cfg: &AdamWConfig,
    t: u64,
    theta: &mut [f64],
    grad: &[f64],
    first: &mut [f64],
    second: &mut [f64],
) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for i in 0..theta.len() {
        let g = grad[i];
        first[i] = cfg.beta1 * first[i] + (1.0 - cfg.beta1) * g;
        second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = first[i] / bc1;
        let v_hat = second[i] / bc2;
        theta[i] = theta[i] * decay - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// AdamW with bias correction and decoupled weight decay, applied to every
/// tensor. Nothing is modified when an error is returned.
pub fn adamw_update(params: &mut Parameters, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    grads.check_congruent(params)?;
    state.check_congruent(params)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients passed to the optimizer".into()));
    }
    state.step += 1;
    let cfg = state.config;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        step_raw(&cfg, state.step, &mut p.data, &g.data, m, v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::seeded_rng;

    fn tiny() -> Parameters {
        let cfg = EncoderConfig {
            vocab_size: 10,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            feedforward_dim: 8,
            max_len: 6,
        };
        Parameters::init(cfg, &mut seeded_rng(1)).unwrap()
    }

    #[test]
    fn zero_grads_no_decay_leave_params() {
        let mut p = tiny();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &p).unwrap();
        let g = Gradients::zeros(p.config());
        adamw_update(&mut p, &g, &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + ε)
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut theta = [0.5];
        let (mut m, mut v) = ([0.0], [0.0]);
        step_raw(&cfg, 1, &mut theta, &[1.0], &mut m, &mut v);
        let expected = 0.5 - 5e-5 / (1.0 + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let cfg = AdamWConfig {
            learning_rate: 1e-2,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut theta = [2.0, -3.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        step_raw(&cfg, 1, &mut theta, &[0.0, 0.0], &mut m, &mut v);
        assert_eq!(theta, [2.0 * (1.0 - 1e-3), -3.0 * (1.0 - 1e-3)]);
    }

    #[test]
    fn two_steps_match_hand_computation() {
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut theta = [1.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        step_raw(&cfg, 1, &mut theta, &[2.0], &mut m, &mut v);
        step_raw(&cfg, 2, &mut theta, &[-1.0], &mut m, &mut v);
        // step 1: m = 0.2, v = 0.004, m̂ = 2, v̂ = 4
        // step 2: m = 0.18 − 0.1, v = 0.999·0.004 + 0.001
        let after_first = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        let m_hat = 0.08 / (1.0 - 0.81);
        let v_hat = (0.999 * 0.004 + 0.001) / (1.0 - 0.999f64 * 0.999);
        let expected = after_first - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta[0] - expected).abs() < 1e-12, "{} vs {expected}", theta[0]);
    }

    #[test]
    fn non_finite_grads_rejected_without_side_effects() {
        let mut p = tiny();
        let before = p.clone();
        let mut st = OptimizerState::new(AdamWConfig::default(), &p).unwrap();
        let mut g = Gradients::zeros(p.config());
        g.tensors_mut()[3].data[0] = f64::NAN;
        assert!(matches!(adamw_update(&mut p, &g, &mut st), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn invalid_config_rejected() {
        let p = tiny();
        let cfg = AdamWConfig {
            beta1: 1.0,
            ..AdamWConfig::default()
        };
        assert!(OptimizerState::new(cfg, &p).is_err());
    }
}
