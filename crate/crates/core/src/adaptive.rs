//! Adaptive reward shaping.
//!
//! A [`ThresholdState`] tracks a running threshold that follows the p-quantile
//! of a bounded history of recent valid rewards, moving by at most
//! `delta_max` per update. Each raw reward is then normalized against the
//! updated threshold and passed through an asymmetric tanh curve, so scores
//! that cluster in a narrow high band are spread back out over [0, 1] while
//! their order is kept.
//!
//! One update step for a batch `r_1..r_B`:
//!
//! ```text
//! valid   = { r : r > max(0, rho * T_t) }
//! H_{t+1} = last l_max entries of (H_t ++ valid)
//! T*      = quantile_p(H_{t+1})
//! T_{t+1} = clip(T_t + clip(T* - T_t, -delta_max, delta_max), t_min, t_max)
//! r_hat   = clip((r - T_{t+1}) / (1 - T_{t+1} + eps), -1, 1)
//! r'      = 0.5 * (1 + tanh(alpha * r_hat)),  alpha = alpha_pos if r_hat >= 0 else alpha_neg
//! ```

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{mean, population_variance};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptError {
    #[error("invalid adaptive config: {0}")]
    InvalidConfig(String),
    #[error("batch length mismatch: {bert} BERTScore values vs {cos} cosine values")]
    LengthMismatch { bert: usize, cos: usize },
    #[error("weight lambda2 must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("unsupported snapshot version {0}")]
    SnapshotVersion(u32),
    #[error("snapshot state violates config: {0}")]
    InvalidSnapshot(String),
}

/// Hyperparameters of the adaptive mapping. Defaults are the published values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Minimum ratio of the current threshold a reward must exceed to enter history.
    pub rho: f64,
    /// History buffer cap.
    pub l_max: usize,
    /// Quantile fraction in (0, 1); 0.5 is the median.
    pub p: f64,
    /// Largest threshold change per update.
    pub delta_max: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Division guard in the normalization step.
    pub eps: f64,
    pub alpha_pos: f64,
    pub alpha_neg: f64,
    /// Threshold before the first update.
    pub initial_threshold: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            rho: 0.8,
            l_max: 2000,
            p: 0.5,
            delta_max: 0.01,
            t_min: 0.0,
            t_max: 0.995,
            eps: 1e-8,
            alpha_pos: 5.0,
            alpha_neg: 2.0,
            initial_threshold: 0.0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<(), AdaptError> {
        let fail = |msg: &str| Err(AdaptError::InvalidConfig(msg.to_string()));
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return fail("need 0 <= t_min < t_max <= 1");
        }
        if !(self.delta_max > 0.0) {
            return fail("delta_max must be positive");
        }
        if self.l_max < 1 {
            return fail("l_max must be at least 1");
        }
        if !(self.alpha_pos > 0.0 && self.alpha_neg > 0.0) {
            return fail("alpha_pos and alpha_neg must be positive");
        }
        if !(self.p > 0.0 && self.p < 1.0) {
            return fail("p must lie strictly between 0 and 1");
        }
        if !(self.eps >= 0.0) || !self.rho.is_finite() {
            return fail("eps must be nonnegative and rho finite");
        }
        if !(self.t_min..=self.t_max).contains(&self.initial_threshold) {
            return fail("initial_threshold must lie in [t_min, t_max]");
        }
        Ok(())
    }
}

/// Linear-interpolation quantile between closest ranks (numpy's default).
/// `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Threshold values around one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdUpdate {
    pub before: f64,
    pub after: f64,
    /// Quantile target, `None` when the history was empty.
    pub target: Option<f64>,
    pub accepted: usize,
}

/// Persistent controller state. Single writer: callers serialize updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    threshold: f64,
    history: VecDeque<f64>,
    step: u64,
}

impl ThresholdState {
    pub fn new(cfg: &AdaptConfig) -> Self {
        Self {
            threshold: cfg.initial_threshold,
            history: VecDeque::with_capacity(cfg.l_max.min(4096)),
            step: 0,
        }
    }

    /// Builds a state from explicit parts, e.g. for replay from a known point.
    pub fn from_parts(
        threshold: f64,
        history: impl IntoIterator<Item = f64>,
        step: u64,
        cfg: &AdaptConfig,
    ) -> Result<Self, AdaptError> {
        if !(cfg.t_min..=cfg.t_max).contains(&threshold) {
            return Err(AdaptError::InvalidSnapshot(format!(
                "threshold {threshold} outside [{}, {}]",
                cfg.t_min, cfg.t_max
            )));
        }
        let history: VecDeque<f64> = history.into_iter().collect();
        if history.len() > cfg.l_max {
            return Err(AdaptError::InvalidSnapshot(format!(
                "history length {} exceeds l_max {}",
                history.len(),
                cfg.l_max
            )));
        }
        if history.iter().any(|v| !v.is_finite()) {
            return Err(AdaptError::InvalidSnapshot("non-finite history entry".into()));
        }
        Ok(Self {
            threshold,
            history,
            step,
        })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn history(&self) -> &VecDeque<f64> {
        &self.history
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Rewards strictly above `max(0, rho * threshold)`, order preserved.
    pub fn filter_valid(&self, rewards: &[f64], cfg: &AdaptConfig) -> Vec<f64> {
        let cutoff = (cfg.rho * self.threshold).max(0.0);
        rewards.iter().copied().filter(|&r| r > cutoff).collect()
    }

    /// Appends `valid` to the history, truncates to the most recent `l_max`
    /// entries and moves the threshold toward the history quantile.
    /// An empty history leaves the threshold unchanged.
    pub fn update(&mut self, valid: &[f64], cfg: &AdaptConfig) -> ThresholdUpdate {
        let before = self.threshold;
        self.history.extend(valid.iter().copied());
        while self.history.len() > cfg.l_max {
            self.history.pop_front();
        }
        self.step += 1;

        if self.history.is_empty() {
            return ThresholdUpdate {
                before,
                after: before,
                target: None,
                accepted: valid.len(),
            };
        }

        let mut sorted: Vec<f64> = self.history.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let target = quantile_sorted(&sorted, cfg.p);
        let delta = (target - before).clamp(-cfg.delta_max, cfg.delta_max);
        self.threshold = (before + delta).clamp(cfg.t_min, cfg.t_max);

        ThresholdUpdate {
            before,
            after: self.threshold,
            target: Some(target),
            accepted: valid.len(),
        }
    }

    /// Filter, update, then map every reward against the updated threshold.
    pub fn adapt_batch(&mut self, rewards: &[f64], cfg: &AdaptConfig) -> AdaptedBatch {
        let valid = self.filter_valid(rewards, cfg);
        let upd = self.update(&valid, cfg);
        let mapped = rewards.iter().map(|&r| adapt_map(r, upd.after, cfg)).collect();
        AdaptedBatch {
            raw: rewards.to_vec(),
            mapped,
            threshold_used: upd.after,
            threshold_before: upd.before,
        }
    }

    pub fn snapshot(&self, cfg: &AdaptConfig) -> StateSnapshot {
        StateSnapshot {
            version: SNAPSHOT_VERSION,
            config: *cfg,
            threshold: self.threshold,
            step: self.step,
            history: self.history.iter().copied().collect(),
        }
    }

    /// Restores a state, checking version and invariants against `snapshot.config`.
    pub fn restore(snapshot: &StateSnapshot) -> Result<Self, AdaptError> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(AdaptError::SnapshotVersion(snapshot.version));
        }
        snapshot.config.validate()?;
        Self::from_parts(
            snapshot.threshold,
            snapshot.history.iter().copied(),
            snapshot.step,
            &snapshot.config,
        )
    }
}

/// On-disk record of one controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub version: u32,
    pub config: AdaptConfig,
    pub threshold: f64,
    pub step: u64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedBatch {
    pub raw: Vec<f64>,
    pub mapped: Vec<f64>,
    pub threshold_before: f64,
    /// The post-update threshold the batch was mapped against.
    pub threshold_used: f64,
}

impl AdaptedBatch {
    pub fn raw_mean(&self) -> f64 {
        mean(&self.raw)
    }
    pub fn raw_var(&self) -> f64 {
        population_variance(&self.raw)
    }
    pub fn mapped_mean(&self) -> f64 {
        mean(&self.mapped)
    }
    pub fn mapped_var(&self) -> f64 {
        population_variance(&self.mapped)
    }
}

/// Asymmetric S-shaped mapping of one reward relative to `threshold`.
/// Returns exactly 0.5 when `reward == threshold`.
pub fn adapt_map(reward: f64, threshold: f64, cfg: &AdaptConfig) -> f64 {
    let r_hat = ((reward - threshold) / (1.0 - threshold + cfg.eps)).clamp(-1.0, 1.0);
    let alpha = if r_hat >= 0.0 { cfg.alpha_pos } else { cfg.alpha_neg };
    (0.5 * (1.0 + (alpha * r_hat).tanh())).clamp(0.0, 1.0)
}

/// Two independent controllers, one per semantic metric, combined with
/// weight `lambda2` on the BERTScore side.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticAdapter {
    pub cfg: AdaptConfig,
    pub lambda2: f64,
    pub bert: ThresholdState,
    pub cos: ThresholdState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveSemanticBatch {
    pub rewards: Vec<f64>,
    pub bert: AdaptedBatch,
    pub cos: AdaptedBatch,
}

impl SemanticAdapter {
    pub fn new(cfg: AdaptConfig, lambda2: f64) -> Result<Self, AdaptError> {
        cfg.validate()?;
        if !(0.0..=1.0).contains(&lambda2) {
            return Err(AdaptError::InvalidWeight(lambda2));
        }
        Ok(Self {
            bert: ThresholdState::new(&cfg),
            cos: ThresholdState::new(&cfg),
            cfg,
            lambda2,
        })
    }

    /// Adaptive semantic reward for one batch; advances both controllers once.
    pub fn step(&mut self, batch_bert: &[f64], batch_cos: &[f64]) -> Result<AdaptiveSemanticBatch, AdaptError> {
        if batch_bert.len() != batch_cos.len() {
            return Err(AdaptError::LengthMismatch {
                bert: batch_bert.len(),
                cos: batch_cos.len(),
            });
        }
        let bert = self.bert.adapt_batch(batch_bert, &self.cfg);
        let cos = self.cos.adapt_batch(batch_cos, &self.cfg);
        let rewards = bert
            .mapped
            .iter()
            .zip(&cos.mapped)
            .map(|(b, c)| self.lambda2 * b + (1.0 - self.lambda2) * c)
            .collect();
        Ok(AdaptiveSemanticBatch { rewards, bert, cos })
    }
}
