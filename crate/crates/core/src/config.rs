//! Plain `key = value` settings file covering every tunable default.
//!
//! Lines starting with `#` and blank lines are ignored. Keys are namespaced by
//! section (`adapt.rho`, `reward.gamma1`, ...). Keys not present keep their
//! defaults; unknown and repeated keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::adaptive::{AdaptConfig, AdaptError};
use crate::eval::HssWeights;
use crate::grpo::{GrpoConfig, GrpoError, KlEstimator};
use crate::reward::{RewardError, RewardWeights};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} already set on line {first}")]
    DuplicateKey { line: usize, key: String, first: usize },
    #[error("line {line}: invalid value {value:?} for {key}")]
    InvalidValue { line: usize, key: String, value: String },
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("HSS weights must be finite and nonnegative")]
    Hss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub adapt: AdaptConfig,
    pub reward: RewardWeights,
    pub grpo: GrpoConfig,
    pub hss: HssWeights,
    /// Records per adaptive-threshold update when scoring a file.
    pub score_batch_size: usize,
    pub mock_dim: usize,
    pub sim_learning_rate: f64,
    pub sim_std_eps: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            reward: RewardWeights::default(),
            grpo: GrpoConfig::default(),
            hss: HssWeights::default(),
            score_batch_size: 8,
            mock_dim: 64,
            sim_learning_rate: 0.05,
            sim_std_eps: 1e-4,
        }
    }
}

enum Slot<'a> {
    F(&'a mut f64),
    U(&'a mut usize),
    Kl(&'a mut KlEstimator),
}

fn kl_name(k: KlEstimator) -> &'static str {
    match k {
        KlEstimator::K3 => "k3",
        KlEstimator::LogRatio => "log-ratio",
    }
}

impl Settings {
    fn slots(&mut self) -> Vec<(&'static str, Slot<'_>)> {
        let Settings {
            adapt: a,
            reward: r,
            grpo: g,
            hss: h,
            score_batch_size,
            mock_dim,
            sim_learning_rate,
            sim_std_eps,
        } = self;
        vec![
            ("adapt.rho", Slot::F(&mut a.rho)),
            ("adapt.l_max", Slot::U(&mut a.l_max)),
            ("adapt.p", Slot::F(&mut a.p)),
            ("adapt.delta_max", Slot::F(&mut a.delta_max)),
            ("adapt.t_min", Slot::F(&mut a.t_min)),
            ("adapt.t_max", Slot::F(&mut a.t_max)),
            ("adapt.eps", Slot::F(&mut a.eps)),
            ("adapt.alpha_pos", Slot::F(&mut a.alpha_pos)),
            ("adapt.alpha_neg", Slot::F(&mut a.alpha_neg)),
            ("adapt.initial_threshold", Slot::F(&mut a.initial_threshold)),
            ("reward.lambda1", Slot::F(&mut r.lambda1)),
            ("reward.lambda2", Slot::F(&mut r.lambda2)),
            ("reward.gamma1", Slot::F(&mut r.gamma1)),
            ("reward.gamma2", Slot::F(&mut r.gamma2)),
            ("reward.gamma3", Slot::F(&mut r.gamma3)),
            ("grpo.group_size", Slot::U(&mut g.group_size)),
            ("grpo.clip_eps", Slot::F(&mut g.clip_eps)),
            ("grpo.kl_beta", Slot::F(&mut g.kl_beta)),
            ("grpo.temperature", Slot::F(&mut g.temperature)),
            ("grpo.std_eps", Slot::F(&mut g.std_eps)),
            ("grpo.kl_estimator", Slot::Kl(&mut g.kl_estimator)),
            ("hss.w_bleu", Slot::F(&mut h.w_bleu)),
            ("hss.w_rouge", Slot::F(&mut h.w_rouge)),
            ("hss.w_bert", Slot::F(&mut h.w_bert)),
            ("hss.w_cos", Slot::F(&mut h.w_cos)),
            ("score.batch_size", Slot::U(score_batch_size)),
            ("embed.mock_dim", Slot::U(mock_dim)),
            ("sim.learning_rate", Slot::F(sim_learning_rate)),
            ("sim.std_eps", Slot::F(sim_std_eps)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Settings::default().slots().into_iter().map(|(k, _)| k).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.adapt.validate()?;
        self.reward.validate()?;
        self.grpo.validate()?;
        self.hss.validate().map_err(|_| ConfigError::Hss)?;
        let bad = |key: &str, value: String| ConfigError::InvalidValue {
            line: 0,
            key: key.into(),
            value,
        };
        if self.score_batch_size == 0 {
            return Err(bad("score.batch_size", "0".into()));
        }
        if self.mock_dim < 2 {
            return Err(bad("embed.mock_dim", self.mock_dim.to_string()));
        }
        if !(self.sim_learning_rate.is_finite() && self.sim_learning_rate > 0.0) {
            return Err(bad("sim.learning_rate", self.sim_learning_rate.to_string()));
        }
        if !(self.sim_std_eps.is_finite() && self.sim_std_eps >= 0.0) {
            return Err(bad("sim.std_eps", self.sim_std_eps.to_string()));
        }
        Ok(())
    }

    /// Every key with its current value, one per line, in a fixed order.
    /// Parsing the output gives back the same settings.
    pub fn render(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        let mut section = "";
        for (key, slot) in copy.slots() {
            let this = key.split('.').next().unwrap_or("");
            if this != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "# {this}");
                section = this;
            }
            let _ = match slot {
                Slot::F(v) => writeln!(out, "{key} = {v:?}"),
                Slot::U(v) => writeln!(out, "{key} = {v}"),
                Slot::Kl(v) => writeln!(out, "{key} = {}", kl_name(*v)),
            };
        }
        out
    }
}

impl FromStr for Settings {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut settings = Settings::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        {
            let mut slots = settings.slots();
            for (i, raw) in text.lines().enumerate() {
                let line = i + 1;
                let body = raw.trim();
                if body.is_empty() || body.starts_with('#') {
                    continue;
                }
                let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
                let (key, value) = (key.trim(), value.trim());
                if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                    return Err(ConfigError::DuplicateKey {
                        line,
                        key: key.into(),
                        first: *first,
                    });
                }
                let slot = slots
                    .iter_mut()
                    .find(|(k, _)| *k == key)
                    .map(|(_, s)| s)
                    .ok_or_else(|| ConfigError::UnknownKey { line, key: key.into() })?;
                let invalid = || ConfigError::InvalidValue {
                    line,
                    key: key.into(),
                    value: value.into(),
                };
                match slot {
                    Slot::F(v) => **v = value.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(invalid)?,
                    Slot::U(v) => **v = value.parse().map_err(|_| invalid())?,
                    Slot::Kl(v) => {
                        **v = match value {
                            "k3" => KlEstimator::K3,
                            "log-ratio" => KlEstimator::LogRatio,
                            _ => return Err(invalid()),
                        }
                    }
                }
                seen.push((key.to_string(), line));
            }
        }
        settings.validate()?;
        Ok(settings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let s = Settings::default();
        let text = s.render();
        assert!(text.contains("adapt.rho = 0.8\n"));
        assert!(text.contains("adapt.t_max = 0.995\n"));
        assert!(text.contains("adapt.eps = 1e-8\n"));
        assert!(text.contains("reward.gamma3 = 0.2\n"));
        assert!(text.contains("grpo.group_size = 8\n"));
        assert!(text.contains("grpo.temperature = 0.7\n"));
        assert!(text.contains("hss.w_cos = 0.4\n"));
        assert_eq!(text.parse::<Settings>().unwrap(), s);
    }

    #[test]
    fn every_key_is_rendered_once() {
        let text = Settings::default().render();
        for key in Settings::keys() {
            assert_eq!(text.matches(&format!("\n{key} = ")).count() + usize::from(text.starts_with(key)), 1, "{key}");
        }
    }

    #[test]
    fn overrides_apply() {
        let s: Settings = "# tuned\nadapt.alpha_pos = 4\n\ngrpo.kl_estimator = log-ratio\nscore.batch_size=16".parse().unwrap();
        assert_eq!(s.adapt.alpha_pos, 4.0);
        assert_eq!(s.grpo.kl_estimator, KlEstimator::LogRatio);
        assert_eq!(s.score_batch_size, 16);
        assert_eq!(s.adapt.rho, 0.8);
    }

    #[test]
    fn errors() {
        assert_eq!("adapt.rho".parse::<Settings>(), Err(ConfigError::Syntax { line: 1 }));
        assert!(matches!("adapt.rh0 = 1".parse::<Settings>(), Err(ConfigError::UnknownKey { line: 1, .. })));
        assert!(matches!(
            "adapt.p = 0.4\nadapt.p = 0.6".parse::<Settings>(),
            Err(ConfigError::DuplicateKey { line: 2, first: 1, .. })
        ));
        assert!(matches!("adapt.l_max = -3".parse::<Settings>(), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!("adapt.p = nan".parse::<Settings>(), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!("adapt.p = 1.5".parse::<Settings>(), Err(ConfigError::Adapt(_))));
        assert!(matches!("reward.gamma1 = -1".parse::<Settings>(), Err(ConfigError::Reward(_))));
        assert!(matches!("grpo.group_size = 1".parse::<Settings>(), Err(ConfigError::Grpo(_))));
        assert!(matches!("hss.w_bert = -0.1".parse::<Settings>(), Err(ConfigError::Hss)));
    }
}
