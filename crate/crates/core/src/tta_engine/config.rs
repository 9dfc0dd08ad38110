use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPolicy {
    /// Running statistics, never changed.
    Frozen,
    /// Statistics of the current batch, used transiently.
    Batch,
    /// Running statistics nudged towards each batch before adapting on it.
    Ema,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerStatePolicy {
    Persistent,
    ResetPerBatch,
}

impl std::str::FromStr for NormPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frozen" => Ok(Self::Frozen),
            "batch" => Ok(Self::Batch),
            "ema" => Ok(Self::Ema),
            _ => Err(Error::invalid(format!("unknown norm policy `{s}` (frozen, batch, ema)"))),
        }
    }
}

pub const DEFAULT_ENERGY_CLAMP: f64 = 1.0 - 1e-6;
/// Update rate of the `ema` normalization policy.
pub const EMA_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub w_energy: f64,
    pub w_sparse: f64,
    pub w_smooth: f64,
    pub learning_rate: f64,
    pub inner_iters: usize,
    pub norm_policy: NormPolicy,
    pub optimizer_state_policy: OptimizerStatePolicy,
    pub energy_clamp: f64,
    pub batch_size: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            w_energy: 0.04,
            w_sparse: 1.0,
            w_smooth: 3.0,
            learning_rate: 5e-3,
            inner_iters: 1,
            norm_policy: NormPolicy::Batch,
            optimizer_state_policy: OptimizerStatePolicy::Persistent,
            energy_clamp: DEFAULT_ENERGY_CLAMP,
            batch_size: 1,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |key: &str, message: &str| Error::Config { key: key.into(), message: message.into() };
        for (k, v) in [("w_energy", self.w_energy), ("w_sparse", self.w_sparse), ("w_smooth", self.w_smooth)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(cfg(k, "must be finite and non-negative"));
            }
        }
        if self.w_energy == 0.0 && self.w_sparse == 0.0 && self.w_smooth == 0.0 {
            return Err(cfg("w_energy", "at least one loss weight must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(cfg("learning_rate", "must be positive"));
        }
        if self.inner_iters == 0 {
            return Err(cfg("inner_iters", "must be at least 1"));
        }
        if !(self.energy_clamp > 0.0 && self.energy_clamp < 1.0) {
            return Err(cfg("energy_clamp", "must be in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(cfg("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}
