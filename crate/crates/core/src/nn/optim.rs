use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { lr, momentum }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidConfig(*self))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("invalid optimizer settings {0:?}")]
    InvalidConfig(OptimizerConfig),
    #[error("non-finite gradient at layer {layer}, parameter {param}, element {index}: {value}")]
    NonFinite {
        layer: usize,
        param: usize,
        index: usize,
        value: f64,
    },
    #[error("gradient layout does not match parameters at layer {layer}")]
    Layout { layer: usize },
}

/// Optimizer moments for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    /// SGD velocity or Adam first moment.
    first: Vec<Vec<Tensor>>,
    /// Adam second moment; empty for SGD.
    second: Vec<Vec<Tensor>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Vec<Tensor>]) -> Result<Self, OptimError> {
        config.validate()?;
        let zeros = || -> Vec<Vec<Tensor>> {
            params
                .iter()
                .map(|ps| ps.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect()
        };
        let second = match config {
            OptimizerConfig::Adam { .. } => zeros(),
            OptimizerConfig::Sgd { .. } => Vec::new(),
        };
        Ok(Self {
            config,
            first: zeros(),
            second,
            step: 0,
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters are left untouched when any gradient
    /// is non-finite or mis-shaped.
    pub fn step(&mut self, params: &mut [Vec<Tensor>], grads: &[Vec<Tensor>]) -> Result<(), OptimError> {
        if grads.len() != params.len() {
            return Err(OptimError::Layout {
                layer: params.len().min(grads.len()),
            });
        }
        for (layer, (ps, gs)) in params.iter().zip(grads).enumerate() {
            if ps.len() != gs.len() || ps.iter().zip(gs).any(|(p, g)| p.shape() != g.shape()) {
                return Err(OptimError::Layout { layer });
            }
            for (param, g) in gs.iter().enumerate() {
                if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(OptimError::NonFinite {
                        layer,
                        param,
                        index,
                        value,
                    });
                }
            }
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((ps, gs), vs) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((p, g), v) in ps.iter_mut().zip(gs).zip(vs) {
                        for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                            *v = momentum * *v + g;
                            *p -= lr * *v;
                        }
                    }
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((ps, gs), ms), vs) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((p, g), m), v) in ps.iter_mut().zip(gs).zip(ms).zip(vs) {
                        for (((p, &g), m), v) in p
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.data_mut())
                            .zip(v.data_mut())
                        {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let m_hat = *m / c1;
                            let v_hat = *v / c2;
                            *p -= lr * m_hat / (v_hat.sqrt() + eps);
                        }
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

    fn scalar(v: f64) -> Vec<Vec<Tensor>> {
        vec![vec![Tensor::full(&[1], v)]]
    }

    #[test]
    fn sgd_direct_formula() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0), &p).unwrap();
        s.step(&mut p, &scalar(2.0)).unwrap();
        assert!((p[0][0].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = scalar(0.0);
        let mut s = OptimizerState::new(OptimizerConfig::sgd(1.0, 0.5), &p).unwrap();
        s.step(&mut p, &scalar(1.0)).unwrap();
        s.step(&mut p, &scalar(1.0)).unwrap();
        // velocity 1 then 1.5
        assert_eq!(p[0][0].data()[0], -2.5);
    }

    #[test]
    fn adam_first_step_bias_corrected() {
        let mut p = scalar(0.0);
        let mut s = OptimizerState::new(OptimizerConfig::adam(0.001), &p).unwrap();
        s.step(&mut p, &scalar(1.0)).unwrap();
        let expected = -0.001 / (1.0 + 1e-8);
        assert!((p[0][0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_is_bitwise_noop() {
        let init = vec![vec![Tensor::new(vec![3], vec![0.3, -1.7, -0.0]).unwrap()]];
        let mut p = init.clone();
        let mut s = OptimizerState::new(OptimizerConfig::adam(0.01), &p).unwrap();
        for _ in 0..50 {
            s.step(&mut p, &[vec![Tensor::zeros(&[3])]]).unwrap();
        }
        assert!(p[0][0].bit_eq(&init[0][0]));
    }

    #[test]
    fn non_finite_gradient_rejected_without_update() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(OptimizerConfig::adam(0.1), &p).unwrap();
        let err = s.step(&mut p, &scalar(f64::NAN)).unwrap_err();
        assert!(matches!(
            err,
            OptimError::NonFinite {
                layer: 0,
                param: 0,
                index: 0,
                ..
            }
        ));
        assert_eq!(p[0][0].data()[0], 1.0);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn invalid_adam_betas_rejected() {
        let bad = OptimizerConfig::Adam {
            lr: 0.1,
            beta1: 1.0,
            beta2: 0.999,
            eps: 1e-8,
        };
        assert!(OptimizerState::new(bad, &scalar(0.0)).is_err());
    }
}
