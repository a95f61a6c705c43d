//! Flat run configuration shared by every training stage.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which policy objective phase two optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Ratio-weighted `Q_mu` plus log-barrier.
    Full,
    /// Same objective with the ratio fixed to one.
    Ablation1,
    /// Ratio fixed to one and `Q_mu` replaced by a critic of the learned policy.
    Ablation2,
}

impl AblationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::Ablation1 => "ablation1",
            AblationMode::Ablation2 => "ablation2",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "full_sbac" => Ok(AblationMode::Full),
            "ablation1" | "no_ratio" => Ok(AblationMode::Ablation1),
            "ablation2" | "q_pi_no_ratio" => Ok(AblationMode::Ablation2),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    Gaussian,
    Laplacian,
}

/// Placement of the two measures compared by the ratio loss; see
/// [`crate::ratio`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdForm {
    Consistent,
    Literal,
}

/// Pairing used by the minibatch ratio loss: all pairs including `i = j`
/// (never negative, biased) or distinct pairs only (unbiased).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmdEstimator {
    VStatistic,
    UStatistic,
}

/// Every knob of a run. Serialized as a flat `key = value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    /// Dataset file; empty means generate from `data_policy` et al.
    pub dataset: String,
    pub data_policy: String,
    pub data_episodes: usize,
    pub data_seed: u64,
    pub rescale_rewards: bool,

    pub mode: AblationMode,
    pub gamma: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub actor_lr: f64,
    pub behavior_lr: f64,
    pub critic_lr: f64,
    pub ratio_lr: f64,
    pub alpha: f64,
    /// Phase-one (behavior cloning + fitted Q-evaluation) steps.
    pub m_steps: usize,
    /// Phase-two (ratio + policy) iterations.
    pub n_steps: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Every model becomes a table over one-hot inputs (discrete tasks only).
    pub tabular: bool,

    pub log_w_clip: f64,
    pub kernel: KernelFamily,
    /// Kernel bandwidth; `0` selects the median heuristic.
    pub bandwidth: f64,
    pub mmd_form: MmdForm,
    /// Self-normalize `w` over each ratio batch inside the loss.
    pub ratio_normalize: bool,
    pub mmd_estimator: MmdEstimator,
    pub importance_floor: f64,
    /// Ratio update every this many policy updates.
    pub ratio_every: usize,

    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_horizon: usize,
    pub log_interval: usize,
    /// Abort when a loss exceeds this multiple of its reference value.
    pub divergence_factor: f64,
    /// Checkpoint every this many steps; `0` writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: "gridworld".into(),
            dataset: String::new(),
            data_policy: "medium".into(),
            data_episodes: 200,
            data_seed: 0,
            rescale_rewards: true,
            mode: AblationMode::Full,
            gamma: 0.99,
            batch_size: 256,
            tau: 0.005,
            actor_lr: 1e-5,
            behavior_lr: 1e-5,
            critic_lr: 1e-4,
            ratio_lr: 1e-4,
            alpha: 0.5,
            m_steps: 20_000,
            n_steps: 20_000,
            seed: 0,
            hidden: vec![256, 256],
            tabular: false,
            log_w_clip: 2.0,
            kernel: KernelFamily::Gaussian,
            bandwidth: 0.0,
            mmd_form: MmdForm::Consistent,
            ratio_normalize: true,
            mmd_estimator: MmdEstimator::UStatistic,
            importance_floor: 1e-4,
            ratio_every: 1,
            eval_interval: 1000,
            eval_episodes: 10,
            eval_horizon: 100,
            log_interval: 100,
            divergence_factor: 1e3,
            checkpoint_interval: 0,
        }
    }
}

/// Penalty weights searched during tuning.
pub const ALPHA_GRID: [f64; 4] = [0.2, 0.5, 2.0, 5.0];

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("actor_lr", self.actor_lr),
            ("behavior_lr", self.behavior_lr),
            ("critic_lr", self.critic_lr),
            ("ratio_lr", self.ratio_lr),
            ("alpha", self.alpha),
            ("log_w_clip", self.log_w_clip),
            ("importance_floor", self.importance_floor),
            ("divergence_factor", self.divergence_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.gamma >= 1.0 {
            return Err(Error::Config("gamma must be below 1".into()));
        }
        if self.tau > 1.0 {
            return Err(Error::Config("tau must be at most 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.bandwidth < 0.0 {
            return Err(Error::Config("bandwidth must be non-negative".into()));
        }
        if self.ratio_every == 0 || self.log_interval == 0 {
            return Err(Error::Config("ratio_every and log_interval must be positive".into()));
        }
        if self.eval_episodes == 0 || self.eval_horizon == 0 {
            return Err(Error::Config("evaluation needs episodes and a horizon".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override using the same syntax as the file.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).map_err(|e| Error::Config(e.to_string()))?;
        if !table.contains_key(key) && !matches!(key, "dataset") {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").unwrap(),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        let updated: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = RunConfig::default();
        assert_eq!((c.gamma, c.batch_size, c.tau), (0.99, 256, 0.005));
        assert_eq!((c.actor_lr, c.behavior_lr, c.critic_lr, c.ratio_lr), (1e-5, 1e-5, 1e-4, 1e-4));
        assert_eq!(c.log_w_clip, 2.0);
        assert!(ALPHA_GRID.contains(&c.alpha));
        c.validate().unwrap();
    }

    #[test]
    fn overrides_and_errors() {
        let mut c = RunConfig::default();
        c.apply_override("alpha=2.0").unwrap();
        c.apply_override("mode = ablation2").unwrap();
        c.apply_override("hidden=[32, 32]").unwrap();
        c.apply_override("env=pointmass").unwrap();
        assert_eq!((c.alpha, c.mode, c.hidden.clone()), (2.0, AblationMode::Ablation2, vec![32, 32]));
        assert_eq!(c.env, "pointmass");
        assert!(c.apply_override("nonsense=1").is_err());
        assert!(c.apply_override("alpha=-1").is_err());
        assert!(RunConfig::from_toml("gamma = 'x'").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    proptest! {
        #[test]
        fn toml_round_trip(
            alpha in 1e-3f64..10.0,
            gamma in 0.5f64..0.999,
            seed in 0u64..(i64::MAX as u64),
            hidden in proptest::collection::vec(1usize..300, 0..4),
            tab in any::<bool>(),
        ) {
            let c = RunConfig { alpha, gamma, seed, hidden, tabular: tab, ..Default::default() };
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            prop_assert_eq!(c, back);
        }
    }
}
