//! Per-step Bernoulli switch for the echo path with a linearly decaying probability.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub p_start: f64,
    pub p_end: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig { p_start: 1.0, p_end: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingSchedule {
    pub p_start: f64,
    pub p_end: f64,
    /// Total optimizer steps.
    pub total_steps: usize,
    pub seed: u64,
}

impl RoutingSchedule {
    pub fn new(p_start: f64, p_end: f64, total_steps: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_end) || !(0.0..=1.0).contains(&p_start) || p_end > p_start {
            return Err(Error::Config(format!(
                "routing probabilities must satisfy 0 <= p_end <= p_start <= 1, got {p_start} -> {p_end}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::Config("routing schedule needs at least one step".into()));
        }
        Ok(RoutingSchedule { p_start, p_end, total_steps, seed })
    }

    pub fn from_config(config: &RoutingConfig, total_steps: usize, seed: u64) -> Result<Self> {
        RoutingSchedule::new(config.p_start, config.p_end, total_steps, seed)
    }

    /// Probability of routing at step `k`; endpoints are exact.
    pub fn prob(&self, k: usize) -> Result<f64> {
        if k >= self.total_steps {
            return Err(Error::Usage(format!("step {k} outside schedule of {} steps", self.total_steps)));
        }
        if self.total_steps == 1 || k == 0 {
            return Ok(self.p_start);
        }
        let last = self.total_steps - 1;
        if k == last {
            return Ok(self.p_end);
        }
        Ok(self.p_start + (k as f64 / last as f64) * (self.p_end - self.p_start))
    }
}

/// Draws one route per step from a dedicated stream.
#[derive(Debug, Clone)]
pub struct Router {
    schedule: RoutingSchedule,
    rng: ChaCha8Rng,
}

impl Router {
    pub fn new(schedule: RoutingSchedule) -> Self {
        Router { rng: stream(schedule.seed, Stream::Routing), schedule }
    }

    pub fn schedule(&self) -> &RoutingSchedule {
        &self.schedule
    }

    /// Returns `(p_k, r_k)`. Exactly one uniform is drawn per call, so the
    /// sequence of draws does not depend on the probabilities.
    pub fn sample(&mut self, k: usize) -> Result<(f64, bool)> {
        let p = self.schedule.prob(k)?;
        let u: f64 = self.rng.random();
        Ok((p, u < p))
    }
}
