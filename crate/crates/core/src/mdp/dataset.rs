use super::{Environment, Policy};
use crate::{Error, Result, Rng};
use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One logged step. `ap` is the action actually taken at `sp` and is absent
/// exactly when `done` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub ep: usize,
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub sp: Vec<f64>,
    pub ap: Option<Vec<f64>>,
    pub done: bool,
}

/// Header line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub policy: String,
    pub r_min: f64,
    pub r_max: f64,
    pub seed: u64,
    pub count: usize,
    /// Reward bounds before rescaling, when rescaling was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_r_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_r_max: Option<f64>,
    #[serde(default = "default_version")]
    pub version: u32,
}

fn default_version() -> u32 {
    DATASET_FORMAT_VERSION
}

/// Ordered trajectories; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    meta: DatasetMeta,
    transitions: Vec<Transition>,
}

impl TransitionDataset {
    /// Validates chaining and recomputes reward bounds and count.
    pub fn new(env: &str, policy: &str, seed: u64, transitions: Vec<Transition>) -> Result<Self> {
        let (r_min, r_max) = reward_bounds(&transitions);
        let meta = DatasetMeta {
            env: env.to_string(),
            policy: policy.to_string(),
            r_min,
            r_max,
            seed,
            count: transitions.len(),
            original_r_min: None,
            original_r_max: None,
            version: DATASET_FORMAT_VERSION,
        };
        let ds = Self { meta, transitions };
        ds.validate()?;
        Ok(ds)
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Checks every dataset invariant.
    pub fn validate(&self) -> Result<()> {
        if self.meta.count != self.transitions.len() {
            return Err(Error::Data(format!(
                "header count {} but {} transitions",
                self.meta.count,
                self.transitions.len()
            )));
        }
        for (i, tr) in self.transitions.iter().enumerate() {
            if !tr.r.is_finite()
                || tr.s.iter().chain(&tr.a).chain(&tr.sp).any(|x| !x.is_finite())
            {
                return Err(Error::Data(format!("non-finite value in transition {i}")));
            }
            if tr.r < self.meta.r_min || tr.r > self.meta.r_max {
                return Err(Error::Data(format!("reward {} outside header bounds", tr.r)));
            }
            if tr.done != tr.ap.is_none() {
                return Err(Error::Data(format!(
                    "transition {i}: next action must be present exactly when not done"
                )));
            }
            if let Some(next) = self.transitions.get(i + 1) {
                if next.ep == tr.ep {
                    if next.t != tr.t + 1 {
                        return Err(Error::Data(format!("transition {}: t does not advance", i + 1)));
                    }
                    if tr.done {
                        return Err(Error::Data(format!("episode {} continues past done", tr.ep)));
                    }
                    if next.s != tr.sp || Some(&next.a) != tr.ap.as_ref() {
                        return Err(Error::Data(format!(
                            "transition {i}: (sp, ap) does not chain into the next step"
                        )));
                    }
                } else if next.t != 0 {
                    return Err(Error::Data(format!("episode {} does not start at t=0", next.ep)));
                }
            }
        }
        if let Some(first) = self.transitions.first() {
            if first.t != 0 {
                return Err(Error::Data("first episode does not start at t=0".into()));
            }
        }
        Ok(())
    }

    /// Affine map of rewards onto `[0, 1]`; a no-op on already rescaled data.
    pub fn rescale_rewards(&self) -> Result<Self> {
        let (lo, hi) = (self.meta.r_min, self.meta.r_max);
        if !(hi > lo) {
            return Err(Error::Degenerate(format!("constant rewards ({lo}); cannot rescale")));
        }
        let span = hi - lo;
        let transitions: Vec<Transition> = self
            .transitions
            .iter()
            .map(|tr| Transition { r: (tr.r - lo) / span, ..tr.clone() })
            .collect();
        let (r_min, r_max) = reward_bounds(&transitions);
        let meta = DatasetMeta {
            r_min,
            r_max,
            original_r_min: Some(self.meta.original_r_min.unwrap_or(lo)),
            original_r_max: Some(self.meta.original_r_max.unwrap_or(hi)),
            ..self.meta.clone()
        };
        Ok(Self { meta, transitions })
    }

    /// Uniform draw of `batch_size` indices with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.transitions.is_empty() {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        let n = self.transitions.len();
        Ok((0..batch_size).map(|_| rng.random_range(0..n)).collect())
    }

    /// Uniform minibatch with replacement.
    pub fn sample_minibatch(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<&Transition>> {
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| &self.transitions[i])
            .collect())
    }

    /// Index of the first transition of each transition's episode.
    pub fn episode_starts(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.transitions.len());
        let mut start = 0;
        for (i, tr) in self.transitions.iter().enumerate() {
            if tr.t == 0 {
                start = i;
            }
            out.push(start);
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, &self.meta)?;
        out.write_all(b"\n")?;
        for tr in &self.transitions {
            serde_json::to_writer(&mut out, tr)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Data("empty dataset file".into()))??;
        let meta: DatasetMeta = serde_json::from_str(&header)
            .map_err(|e| Error::Data(format!("bad dataset header: {e}")))?;
        let mut transitions = Vec::with_capacity(meta.count);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let tr = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("line {}: {e}", i + 2)))?;
            transitions.push(tr);
        }
        let ds = Self { meta, transitions };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

fn reward_bounds(transitions: &[Transition]) -> (f64, f64) {
    if transitions.is_empty() {
        return (0.0, 0.0);
    }
    transitions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), tr| (lo.min(tr.r), hi.max(tr.r)))
}

/// Runs `n_episodes` of `policy` in `env`. Episodes end at a true terminal, at
/// the horizon, or by the environment's per-step truncation coin. Each episode
/// draws from its own generator derived from `seed`, so episodes can run in
/// parallel and the output is deterministic.
pub fn rollout<E, P>(
    env: &E,
    policy: &P,
    policy_id: &str,
    n_episodes: usize,
    seed: u64,
) -> Result<TransitionDataset>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    if policy.action_space() != env.action_space() {
        return Err(Error::InvalidInput(format!(
            "policy acts in {:?} but environment expects {:?}",
            policy.action_space(),
            env.action_space()
        )));
    }
    let mut seeder = Rng::seed_from_u64(seed);
    let episode_seeds: Vec<u64> = (0..n_episodes).map(|_| seeder.random()).collect();
    let episodes: Vec<Vec<Transition>> = episode_seeds
        .par_iter()
        .enumerate()
        .map(|(ep, &ep_seed)| run_episode(env, policy, ep, ep_seed))
        .collect();
    let transitions = episodes.into_iter().flatten().collect();
    TransitionDataset::new(env.id(), policy_id, seed, transitions)
}

fn run_episode<E, P>(env: &E, policy: &P, ep: usize, seed: u64) -> Vec<Transition>
where
    E: Environment + ?Sized,
    P: Policy + ?Sized,
{
    let mut rng = Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut s = env.reset(&mut rng);
    let mut a = policy.sample(&s, &mut rng);
    for t in 0..env.horizon() {
        let step = env.step(&s, &a, &mut rng);
        if step.done {
            out.push(Transition { ep, t, s, a, r: step.reward, sp: step.next_state, ap: None, done: true });
            break;
        }
        let ap = policy.sample(&step.next_state, &mut rng);
        out.push(Transition {
            ep,
            t,
            s,
            a,
            r: step.reward,
            sp: step.next_state.clone(),
            ap: Some(ap.clone()),
            done: false,
        });
        if env.reset_prob() > 0.0 && rng.random::<f64>() < env.reset_prob() {
            break;
        }
        s = step.next_state;
        a = ap;
    }
    out
}
