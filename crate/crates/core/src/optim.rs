//! SGD with momentum, Adam, and a cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default)]
        weight_decay: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    /// SGD at lr 0.1, weight decay 2e-4, momentum 0.9.
    pub fn sgd_default() -> Self {
        OptimizerConfig::Sgd {
            lr: 0.1,
            weight_decay: 2e-4,
            momentum: default_momentum(),
        }
    }

    /// Adam at lr 0.01 without weight decay.
    pub fn adam_default() -> Self {
        OptimizerConfig::Adam {
            lr: 0.01,
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd {
                lr,
                weight_decay,
                momentum,
            } => lr > 0.0 && weight_decay >= 0.0 && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam {
                lr,
                weight_decay,
                beta1,
                beta2,
                eps,
            } => {
                lr > 0.0
                    && weight_decay >= 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step_count: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        let second = match config {
            OptimizerConfig::Sgd { .. } => Vec::new(),
            OptimizerConfig::Adam { .. } => vec![0.0; num_params],
        };
        Self {
            config,
            first: vec![0.0; num_params],
            second,
            step_count: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn num_params(&self) -> usize {
        self.first.len()
    }

    /// One update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer sized for {} params, got params {} and grads {}",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::contract(format!("learning rate must be >= 0, got {lr}")));
        }
        self.step_count += 1;
        match self.config {
            OptimizerConfig::Sgd {
                weight_decay,
                momentum,
                ..
            } => {
                for ((theta, v), &g) in params.iter_mut().zip(&mut self.first).zip(grads) {
                    *v = momentum * *v + g + weight_decay * *theta;
                    *theta -= lr * *v;
                }
            }
            OptimizerConfig::Adam {
                weight_decay,
                beta1,
                beta2,
                eps,
                ..
            } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((theta, m), v), &g) in params
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grads)
                {
                    *theta -= lr * weight_decay * *theta;
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// `lr(step) = ½ lr0 (1 + cos(π step / total_steps))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub lr0: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr0: f64, total_steps: usize) -> Self {
        Self { lr0, total_steps }
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::contract(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        if self.total_steps == 0 {
            return Ok(self.lr0);
        }
        if step == self.total_steps {
            return Ok(0.0);
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(0.5 * self.lr0 * (1.0 + (PI * progress).cos()))
    }
}
