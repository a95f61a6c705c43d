//! Dataset view with model-facing encodings precomputed.

use crate::mdp::{Space, TransitionDataset};
use crate::{Error, Result, Rng};
use rand::Rng as _;
use std::collections::HashMap;

/// A transition with encoded states and interned state keys.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub sp: Vec<f64>,
    pub ap: Option<Vec<f64>>,
    pub done: bool,
    /// Key of `s` into [`TrainingData::states`].
    pub s_key: usize,
    pub sp_key: usize,
    /// Key of the first state of this transition's episode.
    pub s0_key: usize,
}

/// Encoded training view of a [`TransitionDataset`].
///
/// Every distinct encoded state is stored once; transitions refer to it by key.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub state_space: Space,
    pub action_space: Space,
    pub items: Vec<Prepared>,
    states: Vec<Vec<f64>>,
}

impl TrainingData {
    pub fn new(dataset: &TransitionDataset, state_space: Space, action_space: Space) -> Result<Self> {
        let mut interner = Interner::default();
        let starts = dataset.episode_starts();
        let trs = dataset.transitions();
        let mut items = Vec::with_capacity(trs.len());
        for (i, tr) in trs.iter().enumerate() {
            if !state_space.contains(&tr.s) || !state_space.contains(&tr.sp) {
                return Err(Error::Data(format!("transition {i}: state outside {state_space:?}")));
            }
            if tr.a.len() != action_space.raw_dim() || !action_space.is_discrete() && tr.a.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("transition {i}: action outside {action_space:?}")));
            }
            if action_space.is_discrete() && !action_space.contains(&tr.a) {
                return Err(Error::Data(format!("transition {i}: action outside {action_space:?}")));
            }
            let s_key = interner.key(state_space.encode(&tr.s));
            let sp_key = interner.key(state_space.encode(&tr.sp));
            let s0_key = interner.key(state_space.encode(&trs[starts[i]].s));
            items.push(Prepared {
                s: tr.s.clone(),
                a: tr.a.clone(),
                r: tr.r,
                sp: tr.sp.clone(),
                ap: tr.ap.clone(),
                done: tr.done,
                s_key,
                sp_key,
                s0_key,
            });
        }
        Ok(Self { state_space, action_space, items, states: interner.values })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Encoded state for an interned key.
    pub fn state(&self, key: usize) -> &[f64] {
        &self.states[key]
    }

    pub fn n_unique_states(&self) -> usize {
        self.states.len()
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::Data("cannot sample from an empty dataset".into()));
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..self.items.len())).collect())
    }
}

#[derive(Default)]
struct Interner {
    index: HashMap<Vec<u64>, usize>,
    values: Vec<Vec<f64>>,
}

impl Interner {
    fn key(&mut self, v: Vec<f64>) -> usize {
        let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
        if let Some(&k) = self.index.get(&bits) {
            return k;
        }
        let k = self.values.len();
        self.index.insert(bits, k);
        self.values.push(v);
        k
    }
}

/// Groups arbitrary points by exact bit equality. Returns the distinct points
/// and, for each input, its group index.
pub fn group_points(points: &[&[f64]]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut interner = Interner::default();
    let keys = points.iter().map(|p| interner.key(p.to_vec())).collect();
    (interner.values, keys)
}
