//! Adam with bias correction, decoupled weight decay and a linear learning
//! rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::params::{ParamKind, ParameterStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(config_err!("optimizer.lr0 must be positive, got {}", self.lr0));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(config_err!("optimizer.weight_decay must be >= 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(config_err!("optimizer.{name} must lie in [0,1), got {b}"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(config_err!("optimizer.adam_epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub decay_end_iter: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { decay_end_iter: 3000 }
    }
}

/// `lr0 · max(0, 1 − iter/decay_end)`.
pub fn learning_rate(lr0: f64, iter: u64, decay_end: u64) -> f64 {
    if decay_end == 0 {
        return 0.0;
    }
    lr0 * (1.0 - iter as f64 / decay_end as f64).max(0.0)
}

/// First and second moment estimates per parameter, plus the step count.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || -> BTreeMap<String, Vec<f64>> {
            params
                .iter()
                .map(|(n, p)| (n.to_string(), vec![0.0; p.tensor.numel()]))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One Adam update from the gradients accumulated on `params`.
///
/// Weight decay multiplies [`ParamKind::Weight`] tensors by `1 − lr_t·wd`;
/// biases and norm affines are not decayed. A parameter without a gradient
/// is treated as having a zero gradient. Aborts before touching any value if
/// a gradient is non-finite.
pub fn adam_step(params: &mut ParameterStore, state: &mut AdamState, lr_t: f64, cfg: &OptimizerConfig) -> Result<()> {
    for (name, p) in params.iter() {
        if let Some(g) = p.tensor.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter `{name}` at element {i}",
                    g[i]
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| config_err!("no optimizer state for `{name}`"))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| config_err!("no optimizer state for `{name}`"))?;
        let decay = if p.kind == ParamKind::Weight {
            1.0 - lr_t * cfg.weight_decay
        } else {
            1.0
        };
        let grad = p.tensor.grad().map(<[f64]>::to_vec);
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] = data[i] * decay - lr_t * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(x: f64, kind: ParamKind) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(x), kind).unwrap();
        s
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(learning_rate(1e-3, 0, 3000), 1e-3);
        assert!((learning_rate(1e-3, 1500, 3000) - 5e-4).abs() < 1e-18);
        assert_eq!(learning_rate(1e-3, 3000, 3000), 0.0);
        assert_eq!(learning_rate(1e-3, 9000, 3000), 0.0);
    }

    #[test]
    fn zero_gradient_only_decays_weights() {
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..OptimizerConfig::default()
        };
        for (kind, expect) in [(ParamKind::Weight, 2.0 * (1.0 - 0.5 * 0.1)), (ParamKind::Bias, 2.0)] {
            let mut s = store(2.0, kind);
            let mut st = AdamState::new(&s);
            s.get_mut("x").unwrap().accumulate_grad(&[0.0]).unwrap();
            adam_step(&mut s, &mut st, 0.5, &cfg).unwrap();
            assert_eq!(s.get("x").unwrap().data()[0], expect);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut s = store(1.0, ParamKind::Weight);
        let mut st = AdamState::new(&s);
        s.get_mut("x").unwrap().accumulate_grad(&[f64::NAN]).unwrap();
        let err = adam_step(&mut s, &mut st, 0.1, &OptimizerConfig::default()).unwrap_err();
        assert!(err.to_string().contains("`x`"), "{err}");
        assert_eq!(s.get("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let cfg = OptimizerConfig {
            lr0: 0.05,
            ..OptimizerConfig::default()
        };
        let mut s = store(0.0, ParamKind::Bias);
        let mut st = AdamState::new(&s);
        for iter in 0..2000 {
            let x = s.get("x").unwrap().data()[0];
            let p = s.get_mut("x").unwrap();
            p.zero_grad();
            p.accumulate_grad(&[2.0 * (x - 3.0)]).unwrap();
            adam_step(&mut s, &mut st, learning_rate(cfg.lr0, iter, 2000), &cfg).unwrap();
        }
        let x = s.get("x").unwrap().data()[0];
        assert!((x - 3.0).abs() < 0.01, "x = {x}");
    }

    #[test]
    fn frozen_after_decay_end() {
        let cfg = OptimizerConfig::default();
        let mut s = store(1.5, ParamKind::Weight);
        let mut st = AdamState::new(&s);
        s.get_mut("x").unwrap().accumulate_grad(&[4.0]).unwrap();
        adam_step(&mut s, &mut st, learning_rate(cfg.lr0, 3000, 3000), &cfg).unwrap();
        assert_eq!(s.get("x").unwrap().data()[0], 1.5);
    }
}
