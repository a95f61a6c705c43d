//! Shared fixtures for the benchmarks.

use rand::SeedableRng;
use sbac_core::mdp::registry::{generate, make_env};
use sbac_core::{Rng, TrainingData};

/// Training view of `episodes` random-policy episodes on `env`.
pub fn random_data(env: &str, episodes: usize) -> TrainingData {
    let env = make_env(env, 0.99).expect("known environment");
    let ds = generate(env.as_ref(), "random", episodes, 0).expect("rollout");
    TrainingData::new(&ds, env.state_space(), env.action_space()).expect("valid dataset")
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
