use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed, named parameter group. Moments are kept per name so
/// they can be checkpointed next to the weights.
pub struct Adam {
    config: AdamConfig,
    vars: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    steps: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, config: AdamConfig) -> Self {
        Self {
            config,
            vars,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Applies one update from `grads`. Parameters without a gradient keep
    /// their value and moments.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (g.zeros_like()?, g.zeros_like()?),
            };
            let m = ((m * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors keyed `{prefix}.m.{name}` / `{prefix}.v.{name}`.
    pub fn state_tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("{prefix}.m.{name}"), m.clone());
            out.insert(format!("{prefix}.v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor>, steps: u64) -> Result<()> {
        self.moments.clear();
        for (name, var) in &self.vars {
            let m = tensors.get(&format!("{prefix}.m.{name}"));
            let v = tensors.get(&format!("{prefix}.v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    if m.dims() != var.dims() || v.dims() != var.dims() {
                        return Err(Error::CheckpointMismatch {
                            key: format!("{prefix}.{name}"),
                            found: format!("{:?}", m.dims()),
                            expected: format!("{:?}", var.dims()),
                        });
                    }
                    self.moments.insert(name.clone(), (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Config(format!(
                        "optimizer state for `{name}` has only one of its two moments"
                    )))
                }
            }
        }
        self.steps = steps;
        Ok(())
    }
}
