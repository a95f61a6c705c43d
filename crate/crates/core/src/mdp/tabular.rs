use super::{index_of, sample_categorical, Environment, Space, Step};
use crate::{Error, Result, Rng};
use rand::Rng as _;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite MDP with dense transition tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Flattened `P[s][a][s']`.
    transition: Vec<f64>,
    /// Flattened `r[s][a]`.
    reward: Vec<f64>,
    initial: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        discount: f64,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidInput("empty state or action set".into()));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || initial.len() != n_states
        {
            return Err(Error::InvalidInput("tensor shapes do not match sizes".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidInput(format!("discount {discount} outside (0,1)")));
        }
        for sa in 0..n_states * n_actions {
            let row = &transition[sa * n_states..(sa + 1) * n_states];
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidInput(format!("negative probability in row {sa}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::InvalidInput(format!(
                    "transition row (s={}, a={}) sums to {total}",
                    sa / n_actions,
                    sa % n_actions
                )));
            }
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("non-finite reward".into()));
        }
        if initial.iter().any(|&p| !(p >= 0.0))
            || (initial.iter().sum::<f64>() - 1.0).abs() > STOCHASTIC_TOL
        {
            return Err(Error::InvalidInput("initial distribution is not a distribution".into()));
        }
        Ok(Self { n_states, n_actions, transition, reward, initial, discount })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Next-state distribution for `(s, a)`.
    #[inline]
    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        Self::new(
            self.n_states,
            self.n_actions,
            self.transition.clone(),
            self.reward.clone(),
            self.initial.clone(),
            discount,
        )
    }

    /// One state, one action, constant reward.
    pub fn single_state(reward: f64, discount: f64) -> Result<Self> {
        Self::new(1, 1, vec![1.0], vec![reward], vec![1.0], discount)
    }

    /// Two states that deterministically swap, starting in state 0. Action 0
    /// swaps, action 1 (when `n_actions == 2`) stays put. Reward 1 in state 0.
    pub fn two_state_cycle(n_actions: usize, discount: f64) -> Result<Self> {
        let mut p = vec![0.0; 2 * n_actions * 2];
        for s in 0..2 {
            for a in 0..n_actions {
                let next = if a == 0 { 1 - s } else { s };
                p[(s * n_actions + a) * 2 + next] = 1.0;
            }
        }
        let mut r = vec![0.0; 2 * n_actions];
        r[..n_actions].fill(1.0);
        Self::new(2, n_actions, p, r, vec![1.0, 0.0], discount)
    }

    /// Left/right chain. Moves go the opposite way with probability `slip`.
    /// The last state is absorbing and pays reward 1 for any action.
    pub fn chain(n: usize, slip: f64, discount: f64) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput("chain needs at least two states".into()));
        }
        let goal = n - 1;
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2];
        for s in 0..n {
            for a in 0..2 {
                let row = &mut p[(s * 2 + a) * n..(s * 2 + a + 1) * n];
                if s == goal {
                    row[goal] = 1.0;
                    r[s * 2 + a] = 1.0;
                    continue;
                }
                let left = s.saturating_sub(1);
                let right = s + 1;
                let (intended, other) = if a == 1 { (right, left) } else { (left, right) };
                row[intended] += 1.0 - slip;
                row[other] += slip;
            }
        }
        let mut rho = vec![0.0; n];
        rho[0] = 1.0;
        Self::new(n, 2, p, r, rho, discount)
    }

    /// `size x size` grid. Actions: 0 up, 1 right, 2 down, 3 left. The intended
    /// move succeeds with probability `1 - slip`; otherwise one of the other
    /// three directions is taken uniformly. Walls clamp. Start is the top-left
    /// cell; the bottom-right goal is absorbing and pays 1 per step.
    pub fn gridworld(size: usize, slip: f64, discount: f64) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidInput("gridworld needs size >= 2".into()));
        }
        let n = size * size;
        let goal = n - 1;
        let mv = |s: usize, dir: usize| -> usize {
            let (row, col) = (s / size, s % size);
            let (row, col) = match dir {
                0 => (row.saturating_sub(1), col),
                1 => (row, (col + 1).min(size - 1)),
                2 => ((row + 1).min(size - 1), col),
                _ => (row, col.saturating_sub(1)),
            };
            row * size + col
        };
        let mut p = vec![0.0; n * 4 * n];
        let mut r = vec![0.0; n * 4];
        for s in 0..n {
            for a in 0..4 {
                let row = &mut p[(s * 4 + a) * n..(s * 4 + a + 1) * n];
                if s == goal {
                    row[goal] = 1.0;
                    r[s * 4 + a] = 1.0;
                    continue;
                }
                for dir in 0..4 {
                    let prob = if dir == a { 1.0 - slip } else { slip / 3.0 };
                    row[mv(s, dir)] += prob;
                }
            }
        }
        let mut rho = vec![0.0; n];
        rho[0] = 1.0;
        Self::new(n, 4, p, r, rho, discount)
    }

    /// Start state with two exits: action 0 goes straight to an absorbing
    /// sink paying 0.3 per step; action 1 enters a corridor of `corridor`
    /// states (both actions move forward) ending in an absorbing room where
    /// action 0 pays 0.6 and action 1 pays 1.0.
    pub fn detour(corridor: usize, discount: f64) -> Result<Self> {
        let n = corridor + 3;
        let (room, sink) = (corridor + 1, corridor + 2);
        let mut p = vec![0.0; n * 2 * n];
        let mut r = vec![0.0; n * 2];
        let mut set = |s: usize, a: usize, next: usize| p[(s * 2 + a) * n + next] = 1.0;
        set(0, 0, sink);
        set(0, 1, 1);
        for s in 1..=corridor {
            set(s, 0, s + 1);
            set(s, 1, s + 1);
        }
        for a in 0..2 {
            set(room, a, room);
            set(sink, a, sink);
            r[sink * 2 + a] = 0.3;
        }
        r[room * 2] = 0.6;
        r[room * 2 + 1] = 1.0;
        let mut rho = vec![0.0; n];
        rho[0] = 1.0;
        Self::new(n, 2, p, r, rho, discount)
    }

    /// Dense random MDP: every transition row and the initial distribution have
    /// full support, rewards uniform in `[0, 1]`.
    pub fn random(n_states: usize, n_actions: usize, discount: f64, rng: &mut Rng) -> Result<Self> {
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            p.extend(random_simplex(n_states, rng));
        }
        let r = (0..n_states * n_actions).map(|_| rng.random::<f64>()).collect();
        let rho = random_simplex(n_states, rng);
        Self::new(n_states, n_actions, p, r, rho, discount)
    }
}

/// Strictly positive random probability vector.
pub(crate) fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut v: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let drift: f64 = 1.0 - v.iter().sum::<f64>();
    v[0] += drift;
    v
}

/// A [`TabularMdp`] exposed through the [`Environment`] interface.
#[derive(Debug, Clone)]
pub struct TabularEnv {
    id: String,
    mdp: TabularMdp,
    horizon: usize,
    reset_prob: f64,
}

impl TabularEnv {
    pub fn new(id: impl Into<String>, mdp: TabularMdp, horizon: usize, reset_prob: f64) -> Self {
        Self { id: id.into(), mdp, horizon, reset_prob }
    }

    /// Data-generation setup whose state marginal matches discounted visitation.
    pub fn discounted(id: impl Into<String>, mdp: TabularMdp, horizon: usize) -> Self {
        let reset = 1.0 - mdp.discount();
        Self::new(id, mdp, horizon, reset)
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    /// Same task with truncation disabled, used for fixed-length evaluation.
    pub fn with_horizon(&self, horizon: usize, reset_prob: f64) -> Self {
        Self { horizon, reset_prob, ..self.clone() }
    }
}

impl Environment for TabularEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn state_space(&self) -> Space {
        Space::Discrete(self.mdp.n_states)
    }

    fn action_space(&self) -> Space {
        Space::Discrete(self.mdp.n_actions)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset_prob(&self) -> f64 {
        self.reset_prob
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![sample_categorical(&self.mdp.initial, rng) as f64]
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Step {
        let (s, a) = (index_of(state), index_of(action));
        let next = sample_categorical(self.mdp.next_dist(s, a), rng);
        Step { next_state: vec![next as f64], reward: self.mdp.r(s, a), done: false }
    }

    fn as_tabular(&self) -> Option<&TabularMdp> {
        Some(&self.mdp)
    }
}
