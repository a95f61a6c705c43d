//! Phase one: behavior cloning of the data-generating policy and fitted
//! Q-evaluation of its action values.

use crate::approx::{Adam, Mlp, TargetCopy};
use crate::config::RunConfig;
use crate::data::{Prepared, TrainingData};
use crate::harness::{Checkpoint, MetricsRow, Observer};
use crate::mdp::{index_of, PolicyNet, Space, TANH_CLAMP};
use crate::{Error, Result, Rng};
use serde::{Deserialize, Serialize};

/// How a critic sees a state-action pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticInput {
    /// Encoded state followed by encoded action.
    Concat,
    /// One-hot of the pair index `s * n_actions + a`; discrete spaces only.
    Joint,
}

/// `Q(s, a)` as a network over a state-action featurization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub state_space: Space,
    pub action_space: Space,
    pub input: CriticInput,
    pub net: Mlp,
}

impl Critic {
    /// Output layer starts at zero so every initial value is zero. A `Joint`
    /// critic without hidden layers is an exact table.
    pub fn new(state_space: Space, action_space: Space, input: CriticInput, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let in_dim = match (input, state_space, action_space) {
            (CriticInput::Joint, Space::Discrete(n), Space::Discrete(m)) => n * m,
            (CriticInput::Joint, _, _) => {
                return Err(Error::Config("joint critic input needs discrete states and actions".into()))
            }
            (CriticInput::Concat, s, a) => s.encoded_dim() + a.encoded_dim(),
        };
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self { state_space, action_space, input, net: Mlp::new(&sizes, 0.0, rng) })
    }

    /// Exact table critic holding `q[s * n_actions + a]`.
    pub fn from_table(n_states: usize, n_actions: usize, q: &[f64]) -> Result<Self> {
        let mut params = q.to_vec();
        params.push(0.0);
        Ok(Self {
            state_space: Space::Discrete(n_states),
            action_space: Space::Discrete(n_actions),
            input: CriticInput::Joint,
            net: Mlp::from_flat(&[n_states * n_actions, 1], params)?,
        })
    }

    pub fn features(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self.input {
            CriticInput::Joint => {
                let (Space::Discrete(n), Space::Discrete(m)) = (self.state_space, self.action_space) else {
                    unreachable!("checked at construction")
                };
                let mut x = vec![0.0; n * m];
                x[index_of(s) * m + index_of(a)] = 1.0;
                x
            }
            CriticInput::Concat => {
                let mut x = self.state_space.encode(s);
                x.extend(self.action_space.encode(a));
                x
            }
        }
    }

    pub fn value(&self, s: &[f64], a: &[f64]) -> f64 {
        self.net.eval(&self.features(s, a))[0]
    }

    /// Value under another parameter vector with the same shapes (a target copy).
    pub fn value_with(&self, net: &Mlp, s: &[f64], a: &[f64]) -> f64 {
        net.eval(&self.features(s, a))[0]
    }

    /// Value and `dQ/da` for a continuous action.
    pub fn value_and_action_grad(&self, s: &[f64], a: &[f64]) -> (f64, Vec<f64>) {
        let tape = self.net.forward_tape(&self.features(s, a));
        let mut scratch = vec![0.0; self.net.n_params()];
        let input_grad = self.net.backward(&tape, &[1.0], &mut scratch).expect("shapes fixed");
        let offset = self.state_space.encoded_dim();
        (tape.output()[0], input_grad[offset..].to_vec())
    }

    /// Accumulates `scale * dQ/dparams` into `grads` and returns `Q`.
    pub fn accumulate(&self, s: &[f64], a: &[f64], scale: f64, grads: &mut [f64]) -> f64 {
        let tape = self.net.forward_tape(&self.features(s, a));
        self.net.backward(&tape, &[scale], grads).expect("shapes fixed");
        tape.output()[0]
    }
}

/// A loss value with its parameter gradient.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Inputs that had to be clamped to keep the loss finite.
    pub clamped: usize,
}

/// Negative mean log-likelihood of the batch actions.
pub fn bc_loss(model: &PolicyNet, batch: &[&Prepared]) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = batch.len() as f64;
    let state_space = model.state_space();
    let mut grads = vec![0.0; model.net().n_params()];
    let mut total = 0.0;
    let mut clamped = 0;
    for tr in batch {
        if !model.action_space().is_discrete() && tr.a.iter().any(|x| x.abs() > TANH_CLAMP) {
            clamped += 1;
        }
        total += model.log_prob_accumulate(&state_space.encode(&tr.s), &tr.a, -1.0 / n, &mut grads);
    }
    Ok(LossGrad { loss: -total / n, grads, clamped })
}

/// Squared Bellman evaluation error of `critic` against SARSA targets from
/// `target`. No learned policy enters the target.
pub fn fqe_loss(critic: &Critic, target: &Mlp, batch: &[&Prepared], gamma: f64) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = batch.len() as f64;
    let mut grads = vec![0.0; critic.net.n_params()];
    let mut total = 0.0;
    for tr in batch {
        let y = tr.r + if tr.done {
            0.0
        } else {
            let ap = tr.ap.as_ref().ok_or_else(|| Error::Data("non-terminal transition without next action".into()))?;
            gamma * critic.value_with(target, &tr.sp, ap)
        };
        let tape = critic.net.forward_tape(&critic.features(&tr.s, &tr.a));
        let err = tape.output()[0] - y;
        total += err * err;
        critic.net.backward(&tape, &[2.0 * err / n], &mut grads)?;
    }
    Ok(LossGrad { loss: total / n, grads, clamped: 0 })
}

/// Critic, its Polyak-averaged target and its optimizer.
#[derive(Debug, Clone)]
pub struct QEstimate {
    pub critic: Critic,
    pub target: TargetCopy,
    pub optimizer: Adam,
}

impl QEstimate {
    pub fn new(critic: Critic, lr: f64, tau: f64) -> Self {
        let target = TargetCopy::new(&critic.net, tau);
        let optimizer = Adam::new(critic.net.n_params(), lr);
        Self { critic, target, optimizer }
    }

    /// One Adam step on the critic followed by one Polyak step on the target.
    /// Returns the pre-update loss.
    pub fn fqe_step(&mut self, batch: &[&Prepared], gamma: f64) -> Result<f64> {
        let lg = fqe_loss(&self.critic, &self.target.net, batch, gamma)?;
        self.optimizer.step(self.critic.net.params_mut(), &lg.grads);
        self.target.update(&self.critic.net);
        Ok(lg.loss)
    }

    /// Largest prediction over the batch pairs.
    pub fn max_on(&self, batch: &[&Prepared]) -> f64 {
        batch.iter().map(|tr| self.critic.value(&tr.s, &tr.a)).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Aborts when a loss leaves `factor * max(reference, 1)`. The reference is
/// the first observed value.
#[derive(Debug, Clone)]
pub struct DivergenceGuard {
    name: &'static str,
    factor: f64,
    limit: Option<f64>,
}

impl DivergenceGuard {
    pub fn new(name: &'static str, factor: f64) -> Self {
        Self { name, factor, limit: None }
    }

    pub fn check(&mut self, step: usize, value: f64) -> Result<()> {
        let limit = *self.limit.get_or_insert(self.factor * value.abs().max(1.0));
        if !value.is_finite() || value > limit {
            return Err(Error::Divergence { loss: self.name.into(), step, value, limit });
        }
        Ok(())
    }
}

/// Behavior model plus its optimizer.
#[derive(Debug, Clone)]
pub struct BehaviorModel {
    pub policy: PolicyNet,
    pub optimizer: Adam,
}

impl BehaviorModel {
    pub fn new(policy: PolicyNet, lr: f64) -> Self {
        let optimizer = Adam::new(policy.net().n_params(), lr);
        Self { policy, optimizer }
    }

    pub fn bc_step(&mut self, batch: &[&Prepared]) -> Result<LossGrad> {
        let lg = bc_loss(&self.policy, batch)?;
        self.optimizer.step(self.policy.net_mut().params_mut(), &lg.grads);
        Ok(lg)
    }
}

/// Hidden widths for a model: none in tabular mode, the configured ones otherwise.
pub fn hidden_for(cfg: &RunConfig) -> &[usize] {
    if cfg.tabular { &[] } else { &cfg.hidden }
}

/// Fresh behavior model and `Q_mu` critic for a run.
pub fn init_phase_one(data: &TrainingData, cfg: &RunConfig, rng: &mut Rng) -> Result<(BehaviorModel, QEstimate)> {
    if cfg.tabular && !(data.state_space.is_discrete() && data.action_space.is_discrete()) {
        return Err(Error::Config("tabular models need discrete states and actions".into()));
    }
    let policy = PolicyNet::for_spaces(data.state_space, data.action_space, hidden_for(cfg), rng);
    let input = if cfg.tabular { CriticInput::Joint } else { CriticInput::Concat };
    let critic = Critic::new(data.state_space, data.action_space, input, hidden_for(cfg), rng)?;
    Ok((BehaviorModel::new(policy, cfg.behavior_lr), QEstimate::new(critic, cfg.critic_lr, cfg.tau)))
}

/// Outcome of phase one.
#[derive(Debug, Clone)]
pub struct PhaseOne {
    pub behavior: BehaviorModel,
    pub q: QEstimate,
    /// Largest `Q_mu` prediction seen on any training batch.
    pub max_q: f64,
    pub clamped_actions: usize,
}

/// `cfg.m_steps` joint steps of behavior cloning and fitted Q-evaluation.
/// Metrics rows use steps `1..=m_steps`.
pub fn train_phase_one(data: &TrainingData, cfg: &RunConfig, rng: &mut Rng, obs: &mut dyn Observer) -> Result<PhaseOne> {
    let (mut behavior, mut q) = init_phase_one(data, cfg, rng)?;
    let mut guard = DivergenceGuard::new("fqe_loss", cfg.divergence_factor);
    let mut max_q = f64::NEG_INFINITY;
    let mut clamped_actions = 0;
    for step in 1..=cfg.m_steps {
        let idx = data.sample_indices(cfg.batch_size, rng)?;
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data.items[i]).collect();
        let bc = behavior.bc_step(&batch)?;
        clamped_actions += bc.clamped;
        let fqe = q.fqe_step(&batch, cfg.gamma)?;
        guard.check(step, fqe)?;
        max_q = max_q.max(q.max_on(&batch));
        if step % cfg.log_interval == 0 || step == cfg.m_steps {
            obs.metrics(&MetricsRow { step, fqe_loss: Some(fqe), bc_loss: Some(bc.loss), ..Default::default() })?;
        }
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
            obs.checkpoint(&Checkpoint::of(step, "behavior", behavior.policy.net()))?;
            obs.checkpoint(&Checkpoint::of(step, "q_mu", &q.critic.net))?;
        }
    }
    Ok(PhaseOne { behavior, q, max_q, clamped_actions })
}
