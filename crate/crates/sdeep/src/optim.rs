//! First-order optimizers over named parameter sets.
//!
//! Both algorithms apply coupled L2 regularization: the decay term
//! `weight_decay * p` is added to the raw gradient *before* any moment
//! accumulation, so regularization strength scales with the adaptive step
//! like the data gradient does.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("no gradient supplied for parameter {0}")]
    MissingGradient(String),

    #[error("gradient for {name} has {got} entries, parameter has {expected}")]
    GradientSizeMismatch {
        name: String,
        got: usize,
        expected: usize,
    },
}

/// Which update rule to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Adam,
    Adagrad,
}

/// Optimizer settings; see field defaults for the standard values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-6
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: Algorithm::Adam,
            learning_rate: default_lr(),
            weight_decay: default_weight_decay(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ParamState {
    /// First moment for Adam; unused by Adagrad.
    m: Vec<f64>,
    /// Second moment for Adam; squared-gradient accumulator for Adagrad.
    v: Vec<f64>,
}

/// Stateful optimizer keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimConfig,
    step_count: u64,
    state: BTreeMap<String, ParamState>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            step_count: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every parameter, consuming one gradient per
    /// parameter from `grads`. Extra gradient entries are ignored.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<(), OptimError> {
        self.step_count += 1;
        let t = self.step_count;
        let cfg = self.config;
        for (name, param) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| OptimError::MissingGradient(name.clone()))?;
            let n = param.numel();
            if grad.len() != n {
                return Err(OptimError::GradientSizeMismatch {
                    name: name.clone(),
                    got: grad.len(),
                    expected: n,
                });
            }
            let state = self.state.entry(name.clone()).or_insert_with(|| ParamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let data = param.data_mut();
            match cfg.algorithm {
                Algorithm::Adam => {
                    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
                    for i in 0..n {
                        let g = grad[i] + cfg.weight_decay * data[i];
                        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
                        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
                        let m_hat = state.m[i] / bc1;
                        let v_hat = state.v[i] / bc2;
                        data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
                    }
                }
                Algorithm::Adagrad => {
                    for i in 0..n {
                        let g = grad[i] + cfg.weight_decay * data[i];
                        state.v[i] += g * g;
                        data[i] -= cfg.learning_rate * g / (state.v[i].sqrt() + cfg.epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: Vec<f64>) -> BTreeMap<String, Tensor> {
        let mut params = BTreeMap::new();
        let shape = [value.len()];
        params.insert("w".to_string(), Tensor::new(value, &shape).unwrap());
        params
    }

    fn grads_for(values: Vec<f64>) -> BTreeMap<String, Vec<f64>> {
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), values);
        grads
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut params = one_param(vec![1.0, -2.0, 0.5]);
        let grads = grads_for(vec![10.0, -0.3, 0.0001]);
        let mut opt = Optimizer::new(OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        let w = params["w"].data();
        // after bias correction the first step is lr * g / (|g| + eps)
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((w[1] - (-2.0 + 1e-3)).abs() < 1e-6);
        assert!((w[2] - (0.5 - 1e-3)).abs() < 1e-4); // tiny grad still ~sign step
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let original = vec![0.123456789, -9.87, 3.5e-7];
        let mut params = one_param(original.clone());
        let grads = grads_for(vec![1.0, -1.0, 2.0]);
        for algorithm in [Algorithm::Adam, Algorithm::Adagrad] {
            let mut opt = Optimizer::new(OptimConfig {
                algorithm,
                learning_rate: 0.0,
                ..OptimConfig::default()
            });
            for _ in 0..3 {
                opt.step(&mut params, &grads).unwrap();
            }
            assert_eq!(params["w"].data(), original.as_slice());
        }
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_data_gradient() {
        let mut params = one_param(vec![2.0, -2.0]);
        let grads = grads_for(vec![0.0, 0.0]);
        let mut opt = Optimizer::new(OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        let w = params["w"].data();
        assert!(w[0] < 2.0 && w[0] > 1.9);
        assert!(w[1] > -2.0 && w[1] < -1.9);
    }

    #[test]
    fn adagrad_steps_shrink_under_constant_gradient() {
        let mut params = one_param(vec![0.0]);
        let grads = grads_for(vec![1.0]);
        let mut opt = Optimizer::new(OptimConfig {
            algorithm: Algorithm::Adagrad,
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        opt.step(&mut params, &grads).unwrap();
        let first = params["w"].data()[0];
        opt.step(&mut params, &grads).unwrap();
        let second = params["w"].data()[0] - first;
        assert!(first < 0.0 && second < 0.0);
        assert!(second.abs() < first.abs());
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // minimize (w - 3)^2 by feeding its gradient 2(w - 3)
        let mut params = one_param(vec![0.0]);
        let mut opt = Optimizer::new(OptimConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..OptimConfig::default()
        });
        for _ in 0..2000 {
            let w = params["w"].data()[0];
            let grads = grads_for(vec![2.0 * (w - 3.0)]);
            opt.step(&mut params, &grads).unwrap();
        }
        assert!((params["w"].data()[0] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn missing_or_misshapen_gradients_are_errors() {
        let mut params = one_param(vec![1.0, 2.0]);
        let mut opt = Optimizer::new(OptimConfig::default());
        let empty = BTreeMap::new();
        assert!(matches!(
            opt.step(&mut params, &empty),
            Err(OptimError::MissingGradient(_))
        ));
        let wrong = grads_for(vec![1.0]);
        assert!(matches!(
            opt.step(&mut params, &wrong),
            Err(OptimError::GradientSizeMismatch { .. })
        ));
    }
}
