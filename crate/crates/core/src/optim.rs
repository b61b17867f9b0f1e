//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Parameter;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at the configured learning rate.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        self.step_with_lr(params, self.config.lr)
    }

    /// Applies one update with an explicit learning rate (for schedules),
    /// then zeroes every gradient.
    pub fn step_with_lr(&mut self, params: &[Parameter], lr: f64) -> Result<()> {
        for p in params {
            if !p.tensor.has_grad_buffer() {
                return Err(Error::MissingGrad(p.name.clone()));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in params {
            let grad = p.tensor.grad().expect("checked above");
            let n = grad.len();
            let m = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            if m.first.len() != n {
                return Err(Error::shape("adam", &[m.first.len()], p.tensor.shape()));
            }
            for i in 0..n {
                m.first[i] = beta1 * m.first[i] + (1.0 - beta1) * grad[i];
                m.second[i] = beta2 * m.second[i] + (1.0 - beta2) * grad[i] * grad[i];
            }
            p.tensor.update_data(|data| {
                for i in 0..n {
                    let mhat = m.first[i] / c1;
                    let vhat = m.second[i] / c2;
                    data[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            });
            p.tensor.zero_grad();
        }
        Ok(())
    }
}
