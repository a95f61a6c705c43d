//! Offline actor-critic with a state-dependent behavior penalty.
//!
//! The learned policy maximizes `w(s) Q_mu(s, a) + alpha log mu(a|s)` where
//! `Q_mu` comes from fitted Q-evaluation of the behavior policy, `mu` from
//! behavior cloning, and `w(s)` estimates the discounted visitation ratio
//! `d_pi(s) / d_mu(s)` by driving a kernel MMD between `w` and its backward
//! flow image to zero. Every learned quantity has an exact counterpart in
//! [`oracle`] for tabular tasks.

pub mod approx;
pub mod config;
pub mod data;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod mdp;
pub mod oracle;
pub mod ratio;
pub mod sbac;

pub use config::{AblationMode, RunConfig};
pub use data::TrainingData;
pub use error::{Error, Result};
pub use harness::{EvalRecord, MetricsRow, Observer};
pub use mdp::{TransitionDataset, Environment, PolicyNet, Space, TabularMdp, TabularPolicy};
pub use sbac::{train_sbac, SbacOutcome, SbacReport};

/// Generator used everywhere randomness is consumed; portable and seedable.
pub type Rng = rand_chacha::ChaCha8Rng;
