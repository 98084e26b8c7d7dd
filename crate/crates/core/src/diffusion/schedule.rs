use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear variance schedule over `steps` diffusion steps.
///
/// Steps are 1-indexed: `beta(1)` is the first forward transition and
/// `alpha_bar(t) = prod_{s <= t} (1 - beta(s))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(skip)]
    beta: Vec<f32>,
    #[serde(skip)]
    alpha_bar: Vec<f32>,
}

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-3;
pub const DEFAULT_BETA_END: f64 = 0.2;

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid default")
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let mut beta = Vec::with_capacity(steps);
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0f64;
        for i in 0..steps {
            let b = if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            };
            acc *= 1.0 - b;
            beta.push(b as f32);
            alpha_bar.push(acc as f32);
        }
        Ok(Self { steps, beta_start, beta_end, beta, alpha_bar })
    }

    /// Rebuilds the derived tables after deserialization.
    pub fn rebuild(&self) -> Result<Self> {
        Self::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::Step { t, max: self.steps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f32 {
        1.0 - self.beta[t - 1]
    }

    /// `alpha_bar(0) = 1` by convention.
    pub fn alpha_bar(&self, t: usize) -> f32 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}
