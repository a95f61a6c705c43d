//! Named environments and data-generating policies.

use super::{
    behavior_policy, rollout, BehaviorTier, Environment, PointMass, Policy, ScriptedController, TabularEnv,
    TabularMdp, TabularPolicy, TransitionDataset,
};
use crate::config::RunConfig;
use crate::{Error, Result};
use std::path::Path;

pub const ENV_IDS: [&str; 4] = ["gridworld", "chain", "detour", "pointmass"];

/// Episode cap for tabular data; episodes normally end earlier through the
/// `1 - gamma` truncation coin.
pub const TABULAR_HORIZON: usize = 1000;
pub const GRID_SIZE: usize = 5;
pub const GRID_SLIP: f64 = 0.1;
pub const CHAIN_LENGTH: usize = 10;
pub const CHAIN_SLIP: f64 = 0.1;
pub const DETOUR_CORRIDOR: usize = 5;

/// Behavior shipped with the detour task: rarely enters the corridor and
/// mostly takes the weaker action in the room.
pub const RELUCTANT: &str = "reluctant";

pub fn make_env(id: &str, gamma: f64) -> Result<Box<dyn Environment>> {
    let tabular = |mdp: TabularMdp| -> Box<dyn Environment> { Box::new(TabularEnv::discounted(id, mdp, TABULAR_HORIZON)) };
    Ok(match id {
        "gridworld" => tabular(TabularMdp::gridworld(GRID_SIZE, GRID_SLIP, gamma)?),
        "chain" => tabular(TabularMdp::chain(CHAIN_LENGTH, CHAIN_SLIP, gamma)?),
        "detour" => tabular(TabularMdp::detour(DETOUR_CORRIDOR, gamma)?),
        "pointmass" => Box::new(PointMass::default()),
        other => return Err(Error::Config(format!("unknown environment '{other}' (known: {ENV_IDS:?})"))),
    })
}

/// The detour task's own behavior policy.
pub fn reluctant_policy(mdp: &TabularMdp) -> TabularPolicy {
    let n = mdp.n_states();
    let room = n - 2;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|s| match s {
            0 => vec![0.9, 0.1],
            s if s == room => vec![0.8, 0.2],
            _ => vec![0.5, 0.5],
        })
        .collect();
    TabularPolicy::from_rows(&rows).expect("rows are distributions")
}

/// Tabular behavior policy by name, when `env` is tabular.
pub fn tabular_behavior(env: &dyn Environment, policy: &str) -> Result<Option<TabularPolicy>> {
    let Some(mdp) = env.as_tabular() else { return Ok(None) };
    if policy == RELUCTANT {
        if env.id() != "detour" {
            return Err(Error::Config(format!("'{RELUCTANT}' is only defined for the detour task")));
        }
        return Ok(Some(reluctant_policy(mdp)));
    }
    Ok(Some(behavior_policy(mdp, policy.parse::<BehaviorTier>()?)))
}

pub fn make_behavior(env: &dyn Environment, policy: &str) -> Result<Box<dyn Policy>> {
    if let Some(p) = tabular_behavior(env, policy)? {
        return Ok(Box::new(p));
    }
    let tier: BehaviorTier = policy.parse()?;
    Ok(Box::new(ScriptedController::for_tier(PointMass::default().goal, tier)))
}

/// Rolls out the named behavior policy.
pub fn generate(env: &dyn Environment, policy: &str, episodes: usize, seed: u64) -> Result<TransitionDataset> {
    let behavior = make_behavior(env, policy)?;
    rollout(env, behavior.as_ref(), policy, episodes, seed)
}

/// Environment and training data for a run: loads `cfg.dataset` when set,
/// otherwise generates it, then rescales rewards when configured.
pub fn dataset_for(cfg: &RunConfig) -> Result<(Box<dyn Environment>, TransitionDataset)> {
    let env = make_env(&cfg.env, cfg.gamma)?;
    let ds = if cfg.dataset.is_empty() {
        generate(env.as_ref(), &cfg.data_policy, cfg.data_episodes, cfg.data_seed)?
    } else {
        let ds = TransitionDataset::load(Path::new(&cfg.dataset))?;
        if ds.meta().env != cfg.env {
            return Err(Error::Data(format!("dataset was collected on '{}', config says '{}'", ds.meta().env, cfg.env)));
        }
        ds
    };
    let ds = if cfg.rescale_rewards { ds.rescale_rewards()? } else { ds };
    Ok((env, ds))
}
