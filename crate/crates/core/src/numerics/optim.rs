use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Momentum SGD settings. The learning rate at step `s` is `base_lr` times
/// every multiplier whose threshold is `<= s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub base_lr: f32,
    pub momentum: f32,
    #[serde(default)]
    pub schedule: Vec<LrStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrStep {
    pub at: u64,
    pub multiplier: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            momentum: 0.9,
            schedule: Vec::new(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(bad) = self.schedule.iter().find(|s| !(s.multiplier.is_finite() && s.multiplier > 0.0)) {
            return Err(Error::Config(format!("schedule multipliers must be positive, got {}", bad.multiplier)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f32 {
        self.schedule
            .iter()
            .filter(|s| s.at <= step)
            .fold(self.base_lr, |lr, s| lr * s.multiplier)
    }
}

/// Optimizer state: one velocity buffer per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor>,
    step: u64,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: params.iter().map(Tensor::zeros_like).collect(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f32 {
        self.config.lr_at(self.step)
    }

    /// `v ← μ·v + g; w ← w − lr·v` for every parameter with `trainable[i]`.
    /// Untrainable parameters and their velocity are left untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], trainable: &[bool]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() || trainable.len() != params.len() {
            return Err(shape_err!(
                "sgd step: {} params, {} grads, {} mask entries, {} velocity buffers",
                params.len(),
                grads.len(),
                trainable.len(),
                self.velocity.len()
            ));
        }
        for (i, ((w, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if w.shape() != g.shape() || w.shape() != v.shape() {
                return Err(shape_err!(
                    "sgd step: parameter {i} has shape {:?}, gradient {:?}",
                    w.shape(),
                    g.shape()
                ));
            }
        }
        let lr = self.current_lr();
        let mu = self.config.momentum;
        for (((w, g), v), &on) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(trainable) {
            if !on {
                continue;
            }
            for ((wi, &gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        self.step += 1;
        Ok(())
    }
}
