//! λ sampling during training.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dc::LambdaValue;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Fixed,
    Uniform,
    /// `cos(π·⌊e/φ⌋) + ε`. Piecewise constant in the epoch.
    CosineLiteral,
    /// `½(1 + cos(π·min(e, φ)/φ)) + ε`, falling from 1 to 0 over φ epochs.
    CosineAnnealed,
}

/// Scheduler parameters as they appear under `[scheduler]` in a run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub strategy: Strategy,
    pub phi: f64,
    /// Multiplier on the standard normal perturbation.
    pub eps_scale: f64,
    /// Value returned by the `fixed` strategy.
    pub fixed_value: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CosineAnnealed,
            phi: 100.0,
            eps_scale: 0.05,
            fixed_value: 0.1,
        }
    }
}

impl SchedulerConfig {
    pub fn fixed(value: f64) -> Self {
        Self {
            strategy: Strategy::Fixed,
            fixed_value: value,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi.is_finite() && self.phi > 0.0) {
            return Err(Error::invalid("phi", "must be positive"));
        }
        if !(self.eps_scale.is_finite() && self.eps_scale >= 0.0) {
            return Err(Error::invalid("eps_scale", "must be nonnegative"));
        }
        if self.strategy == Strategy::Fixed {
            LambdaValue::new(self.fixed_value).map_err(|_| Error::invalid("fixed_value", "must lie in [0, 1]"))?;
        }
        Ok(())
    }

    pub fn at_epoch(&self, epoch: usize) -> Result<ScheduleState> {
        self.validate()?;
        Ok(ScheduleState {
            epoch,
            config: self.clone(),
        })
    }
}

/// Scheduler configuration bound to a particular epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleState {
    epoch: usize,
    config: SchedulerConfig,
}

impl ScheduleState {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    /// The deterministic part of the schedule, before noise and clamping.
    pub fn center(&self) -> f64 {
        let c = &self.config;
        let e = self.epoch as f64;
        match c.strategy {
            Strategy::Fixed => c.fixed_value,
            Strategy::Uniform => 0.5,
            Strategy::CosineLiteral => (PI * (e / c.phi).floor()).cos(),
            Strategy::CosineAnnealed => 0.5 * (1.0 + (PI * e.min(c.phi) / c.phi).cos()),
        }
    }
}

/// Draws one λ and clamps it to `[0, 1]`.
pub fn sample_lambda(state: &ScheduleState, rng: &mut impl Rng) -> LambdaValue {
    let c = &state.config;
    let raw = match c.strategy {
        Strategy::Fixed => c.fixed_value,
        Strategy::Uniform => rng.random::<f64>(),
        Strategy::CosineLiteral | Strategy::CosineAnnealed => {
            let eta: f64 = StandardNormal.sample(rng);
            state.center() + c.eps_scale * eta
        }
    };
    LambdaValue::clamped(raw)
}
