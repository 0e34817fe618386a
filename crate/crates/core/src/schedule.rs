//! Diffusion noise schedules.
//!
//! Time steps are 1-based: `t = 1..=T`, with `t = 0` reserved for clean data
//! (`alpha_bar(0) == 1`).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Serializable description of a schedule, as stored in run configs and
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub schedule_kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_kind: ScheduleKind::Linear,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.schedule_kind {
            ScheduleKind::Linear => linear_schedule(self.steps, self.beta_start, self.beta_end),
        }
    }
}

/// Per-step variance tables `beta`, `alpha = 1 - beta` and the running
/// product `alpha_bar`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Betas linearly spaced from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return invalid!("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}");
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(beta)
}

impl NoiseSchedule {
    /// Build from an explicit beta sequence (index 0 holds `beta_1`).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return invalid!("schedule needs at least one step");
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return invalid!("every beta must lie in (0, 1), found {b}");
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.index(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.index(t)]
    }

    /// Cumulative product of alphas; `alpha_bar(0)` is 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[self.index(t)]
        }
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid!("time step {t} outside 1..={}", self.steps());
        }
        Ok(())
    }

    /// Variance of the forward-process posterior q(x_{t-1} | x_t, x_0).
    ///
    /// Defined as 0 at t = 1: the last reverse step adds no noise.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        if t <= 1 {
            return 0.0;
        }
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn index(&self, t: usize) -> usize {
        assert!(
            t >= 1 && t <= self.steps(),
            "time step {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }
}
