use super::{index_of, sample_categorical, Space, TabularMdp};
use crate::{oracle, Error, Result, Rng};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Anything that can act in an environment and score its own actions.
///
/// `log_prob` is a log-probability for discrete action spaces and a log-density
/// with respect to Lebesgue measure on `[-1, 1]^d` for boxes.
pub trait Policy: Sync {
    fn action_space(&self) -> Space;
    fn sample(&self, state: &[f64], rng: &mut Rng) -> Vec<f64>;
    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64;
}

/// Row-stochastic matrix `pi[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::InvalidInput("policy table has wrong size".into()));
        }
        for s in 0..n_states {
            let row = &probs[s * n_actions..(s + 1) * n_actions];
            if row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("policy row {s} is not a distribution")));
            }
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    /// Builds a policy from per-state rows, renormalizing away round-off.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(rows.len() * n_actions);
        for row in rows {
            let total: f64 = row.iter().sum();
            if row.len() != n_actions || !(total > 0.0) {
                return Err(Error::InvalidInput("bad policy row".into()));
            }
            probs.extend(row.iter().map(|p| p / total));
        }
        Self::new(rows.len(), n_actions, probs)
    }

    /// Epsilon-greedy with respect to `q[s * n_actions + a]`; ties go to the
    /// lowest action index.
    pub fn epsilon_greedy(q: &[f64], n_states: usize, n_actions: usize, eps: f64) -> Self {
        let mut probs = vec![eps / n_actions as f64; n_states * n_actions];
        for s in 0..n_states {
            let row = &q[s * n_actions..(s + 1) * n_actions];
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let a = row.iter().position(|&v| v >= best - 1e-9).unwrap_or(0);
            probs[s * n_actions + a] += 1.0 - eps;
        }
        Self { n_states, n_actions, probs }
    }

    /// Per-state mixture `weight * a + (1 - weight) * b`.
    pub fn mixture(a: &Self, b: &Self, weight: f64) -> Result<Self> {
        if a.n_states != b.n_states || a.n_actions != b.n_actions {
            return Err(Error::InvalidInput("mixture of mismatched policies".into()));
        }
        let probs = a.probs.iter().zip(&b.probs).map(|(x, y)| weight * x + (1.0 - weight) * y);
        Ok(Self { n_states: a.n_states, n_actions: a.n_actions, probs: probs.collect() })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Total-variation distance between the action distributions at `s`.
    pub fn tv_at(&self, other: &Self, s: usize) -> f64 {
        0.5 * self.row(s).iter().zip(other.row(s)).map(|(p, q)| (p - q).abs()).sum::<f64>()
    }

    /// `KL(self(.|s) || other(.|s))`; infinite when `other` misses support.
    pub fn kl_at(&self, other: &Self, s: usize) -> f64 {
        self.row(s)
            .iter()
            .zip(other.row(s))
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| if *q > 0.0 { p * (p / q).ln() } else { f64::INFINITY })
            .sum()
    }
}

impl Policy for TabularPolicy {
    fn action_space(&self) -> Space {
        Space::Discrete(self.n_actions)
    }

    fn sample(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        vec![sample_categorical(self.row(index_of(state)), rng) as f64]
    }

    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        self.prob(index_of(state), index_of(action)).ln()
    }
}

/// Dataset-quality tiers used when generating offline data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorTier {
    Random,
    Medium,
    Expert,
    Mixed,
}

impl BehaviorTier {
    pub const MEDIUM_EPS: f64 = 0.3;
    pub const EXPERT_EPS: f64 = 0.05;

    pub fn as_str(&self) -> &'static str {
        match self {
            BehaviorTier::Random => "random",
            BehaviorTier::Medium => "medium",
            BehaviorTier::Expert => "expert",
            BehaviorTier::Mixed => "mixed",
        }
    }
}

impl fmt::Display for BehaviorTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BehaviorTier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BehaviorTier::Random),
            "medium" => Ok(BehaviorTier::Medium),
            "expert" => Ok(BehaviorTier::Expert),
            "mixed" => Ok(BehaviorTier::Mixed),
            other => Err(Error::Config(format!("unknown behavior policy '{other}'"))),
        }
    }
}

/// Behavior policy of the requested tier on a tabular task. Medium and expert
/// are epsilon-greedy on the optimal action values; mixed is their even
/// per-state mixture.
pub fn behavior_policy(mdp: &TabularMdp, tier: BehaviorTier) -> TabularPolicy {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    match tier {
        BehaviorTier::Random => TabularPolicy::uniform(ns, na),
        BehaviorTier::Medium | BehaviorTier::Expert | BehaviorTier::Mixed => {
            let q = oracle::optimal_q(mdp);
            let medium = TabularPolicy::epsilon_greedy(&q, ns, na, BehaviorTier::MEDIUM_EPS);
            let expert = TabularPolicy::epsilon_greedy(&q, ns, na, BehaviorTier::EXPERT_EPS);
            match tier {
                BehaviorTier::Medium => medium,
                BehaviorTier::Expert => expert,
                _ => TabularPolicy::mixture(&medium, &expert, 0.5).expect("same shapes"),
            }
        }
    }
}
