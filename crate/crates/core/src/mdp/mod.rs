//! Environments, policies, rollouts and the transition-dataset model.
//!
//! States and actions travel as `Vec<f64>` everywhere. Discrete spaces encode
//! an index as a single-element vector; learned models never see that index
//! directly and go through [`Space::encode`] instead (one-hot for discrete,
//! identity for boxes).

mod dataset;
mod pointmass;
mod policy;
mod policy_net;
pub mod registry;
mod tabular;

pub use dataset::{
    rollout, DatasetMeta, Transition, TransitionDataset, DATASET_FORMAT_VERSION,
};
pub use pointmass::{PointMass, ScriptedController};
pub use policy::{behavior_policy, BehaviorTier, Policy, TabularPolicy};
pub use policy_net::{
    softmax, ActionDensity, CategoricalPolicy, GaussianTanhPolicy, PolicyNet, LOG_STD_MAX,
    LOG_STD_MIN, TANH_CLAMP,
};
pub use tabular::{TabularEnv, TabularMdp};

use crate::Rng;
use rand::Rng as _;

/// Shape of a state or action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Space {
    Discrete(usize),
    /// Box of the given dimension; action boxes are always `[-1, 1]^d`.
    Box(usize),
}

impl Space {
    /// Width of the model-facing encoding.
    pub fn encoded_dim(&self) -> usize {
        match *self {
            Space::Discrete(n) | Space::Box(n) => n,
        }
    }

    /// Width of the raw representation stored in datasets.
    pub fn raw_dim(&self) -> usize {
        match *self {
            Space::Discrete(_) => 1,
            Space::Box(d) => d,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Space::Discrete(_))
    }

    /// One-hot for discrete spaces, identity for boxes.
    pub fn encode(&self, raw: &[f64]) -> Vec<f64> {
        match *self {
            Space::Discrete(n) => {
                let mut v = vec![0.0; n];
                v[index_of(raw)] = 1.0;
                v
            }
            Space::Box(_) => raw.to_vec(),
        }
    }

    /// Checks that a raw value belongs to this space.
    pub fn contains(&self, raw: &[f64]) -> bool {
        match *self {
            Space::Discrete(n) => {
                raw.len() == 1 && raw[0] >= 0.0 && raw[0].fract() == 0.0 && (raw[0] as usize) < n
            }
            Space::Box(d) => raw.len() == d && raw.iter().all(|x| x.is_finite()),
        }
    }
}

/// Index stored in a discrete raw value.
#[inline]
pub fn index_of(raw: &[f64]) -> usize {
    raw[0] as usize
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True terminal (no bootstrapping past it), not a time-limit truncation.
    pub done: bool,
}

/// An episodic environment usable for data generation and evaluation.
pub trait Environment: Sync {
    fn id(&self) -> &str;
    fn state_space(&self) -> Space;
    fn action_space(&self) -> Space;
    /// Hard cap on episode length.
    fn horizon(&self) -> usize;
    /// Per-step probability of truncating an episode during data generation.
    ///
    /// Tabular tasks use `1 - discount`, which makes the state marginal of the
    /// generated data equal to the discounted visitation of the behavior policy.
    fn reset_prob(&self) -> f64 {
        0.0
    }
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Step;
    fn as_tabular(&self) -> Option<&TabularMdp> {
        None
    }
}

/// Draws an index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last index with positive mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}
