//! Phase two: the ratio-weighted, log-barrier-penalized policy objective,
//! its two ablations, and the end-to-end training loop.

use crate::approx::Adam;
use crate::config::{AblationMode, RunConfig};
use crate::data::{Prepared, TrainingData};
use crate::estimators::{hidden_for, train_phase_one, Critic, DivergenceGuard, LossGrad, QEstimate};
use crate::harness::{Checkpoint, EvalRecord, MetricsRow, Observer};
use crate::mdp::{softmax, ActionDensity, Environment, PolicyNet, Space};
use crate::oracle::exact_return;
use crate::ratio::{normalize_mean, RatioTrainer};
use crate::{Error, Result, Rng};
use rand::{Rng as _, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Per-state objective `w Q(s, a) + alpha log mu(a|s)` and its action gradient.
fn objective(q: &Critic, mu: &dyn ActionDensity, s: &[f64], feats: &[f64], a: &[f64], w: f64, alpha: f64) -> (f64, Vec<f64>) {
    let (qv, dq) = q.value_and_action_grad(s, a);
    let lm = mu.log_density(feats, a);
    let dlm = mu.log_density_action_grad(feats, a);
    let g = dq.iter().zip(&dlm).map(|(x, y)| w * x + alpha * y).collect();
    (w * qv + alpha * lm, g)
}

/// `-mean_s E_{a ~ pi}[w(s) Q(s, a) + alpha log mu(a|s)]` with `w` held fixed.
///
/// Discrete actions use the exact expectation over actions. Continuous actions
/// use one reparameterized draw per state, so the gradient reaches the policy
/// through the sampled action. `states` are raw states; `weights` align with
/// them.
pub fn policy_loss<P: AsRef<[f64]>>(
    pi: &PolicyNet,
    q: &Critic,
    mu: &dyn ActionDensity,
    states: &[P],
    weights: &[f64],
    alpha: f64,
    rng: &mut Rng,
) -> Result<LossGrad> {
    if states.is_empty() || states.len() != weights.len() {
        return Err(Error::InvalidInput("policy loss needs one weight per state".into()));
    }
    let n = states.len() as f64;
    let net = pi.net();
    let space = pi.state_space();
    let mut grads = vec![0.0; net.n_params()];
    let mut total = 0.0;
    let mut clamped = 0;
    for (s, &w) in states.iter().zip(weights) {
        let s = s.as_ref();
        let feats = space.encode(s);
        let tape = net.forward_tape(&feats);
        let out_grad = match pi {
            PolicyNet::Categorical(p) => {
                let probs = softmax(tape.output());
                let f: Vec<f64> = (0..p.n_actions)
                    .map(|a| {
                        let a = [a as f64];
                        w * q.value(s, &a) + alpha * mu.log_density(&feats, &a)
                    })
                    .collect();
                let mean_f: f64 = probs.iter().zip(&f).map(|(p, f)| p * f).sum();
                total += mean_f;
                probs.iter().zip(&f).map(|(p, f)| -p * (f - mean_f) / n).collect::<Vec<f64>>()
            }
            PolicyNet::GaussianTanh(p) => {
                let params = p.params_from_output(tape.output());
                let draw = p.sample_with(&params, rng);
                let (f, df_da) = objective(q, mu, s, &feats, &draw.action, w, alpha);
                if !f.is_finite() {
                    clamped += 1;
                    continue;
                }
                total += f;
                let d = p.action_dim;
                let mut g = vec![0.0; 2 * d];
                for i in 0..d {
                    let a = draw.action[i];
                    let df_du = df_da[i] * (1.0 - a * a);
                    g[i] = -df_du / n;
                    if params.log_std_free[i] {
                        g[d + i] = -df_du * params.log_std[i].exp() * draw.noise[i] / n;
                    }
                }
                g
            }
        };
        net.backward(&tape, &out_grad, &mut grads)?;
    }
    Ok(LossGrad { loss: -total / n, grads, clamped })
}

/// The objective with the ratio fixed to one.
pub fn ablation_one_loss<P: AsRef<[f64]>>(
    pi: &PolicyNet,
    q_mu: &Critic,
    mu: &dyn ActionDensity,
    states: &[P],
    alpha: f64,
    rng: &mut Rng,
) -> Result<LossGrad> {
    policy_loss(pi, q_mu, mu, states, &vec![1.0; states.len()], alpha, rng)
}

/// The objective with the ratio fixed to one and a critic of `pi` itself.
pub fn ablation_two_loss<P: AsRef<[f64]>>(
    pi: &PolicyNet,
    q_pi: &Critic,
    mu: &dyn ActionDensity,
    states: &[P],
    alpha: f64,
    rng: &mut Rng,
) -> Result<LossGrad> {
    policy_loss(pi, q_pi, mu, states, &vec![1.0; states.len()], alpha, rng)
}

/// The objective split as value plus state-dependent penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    /// `mean_s E_pi Q(s, a)`.
    pub value_term: f64,
    /// `mean_s (1 / w(s)) E_pi[-log mu(a|s)]`.
    pub penalty_term: f64,
    /// Effective per-state penalty weight `alpha / w(s)`.
    pub effective_alpha: Vec<f64>,
    /// Whether `w Q + alpha log mu` and `Q + (alpha / w) log mu` pick the
    /// same candidate action in every state.
    pub argmax_agrees: bool,
}

/// Candidate actions for per-state argmax comparisons: every discrete action,
/// or 100 grid points (1-D) / 100 uniform points (higher dimensions).
pub fn candidate_actions(space: Space, rng: &mut Rng) -> Vec<Vec<f64>> {
    match space {
        Space::Discrete(n) => (0..n).map(|a| vec![a as f64]).collect(),
        Space::Box(1) => (0..100).map(|i| vec![-0.99 + 1.98 * i as f64 / 99.0]).collect(),
        Space::Box(d) => (0..100).map(|_| (0..d).map(|_| rng.random_range(-0.99..0.99)).collect()).collect(),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn soft_regularization_decomposition<P: AsRef<[f64]>>(
    pi: &PolicyNet,
    q: &Critic,
    mu: &dyn ActionDensity,
    states: &[P],
    weights: &[f64],
    alpha: f64,
    rng: &mut Rng,
) -> Result<Decomposition> {
    if states.is_empty() || states.len() != weights.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidInput("decomposition needs one positive weight per state".into()));
    }
    let n = states.len() as f64;
    let space = pi.state_space();
    let candidates = candidate_actions(pi.action_space(), rng);
    let (mut value, mut penalty, mut agrees) = (0.0, 0.0, true);
    for (s, &w) in states.iter().zip(weights) {
        let s = s.as_ref();
        let feats = space.encode(s);
        let (ev_q, ev_nlm) = match pi {
            PolicyNet::Categorical(p) => {
                let probs = p.probs(&feats);
                probs.iter().enumerate().fold((0.0, 0.0), |(eq, el), (a, pa)| {
                    let a = [a as f64];
                    (eq + pa * q.value(s, &a), el - pa * mu.log_density(&feats, &a))
                })
            }
            PolicyNet::GaussianTanh(p) => {
                let a = p.sample_with(&p.gaussian(&feats), rng).action;
                (q.value(s, &a), -mu.log_density(&feats, &a))
            }
        };
        value += ev_q / n;
        penalty += ev_nlm / (w * n);
        let qs: Vec<f64> = candidates.iter().map(|a| q.value(s, a)).collect();
        let lms: Vec<f64> = candidates.iter().map(|a| mu.log_density(&feats, a)).collect();
        let lhs: Vec<f64> = qs.iter().zip(&lms).map(|(q, l)| w * q + alpha * l).collect();
        let rhs: Vec<f64> = qs.iter().zip(&lms).map(|(q, l)| q + alpha / w * l).collect();
        agrees &= argmax(&lhs) == argmax(&rhs);
    }
    Ok(Decomposition {
        value_term: value,
        penalty_term: penalty,
        effective_alpha: weights.iter().map(|w| alpha / w).collect(),
        argmax_agrees: agrees,
    })
}

/// One evaluation step for a critic of `pi`: targets average the target
/// critic over `a' ~ pi(.|s')` (exactly for discrete actions, one draw
/// otherwise). Returns the pre-update loss.
pub fn q_pi_step(q: &mut QEstimate, pi: &PolicyNet, batch: &[&Prepared], gamma: f64, rng: &mut Rng) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = batch.len() as f64;
    let critic = &q.critic;
    let target = &q.target.net;
    let space = pi.state_space();
    let mut grads = vec![0.0; critic.net.n_params()];
    let mut total = 0.0;
    for tr in batch {
        let next = if tr.done {
            0.0
        } else {
            match pi {
                PolicyNet::Categorical(p) => p
                    .probs(&space.encode(&tr.sp))
                    .iter()
                    .enumerate()
                    .map(|(a, pa)| pa * critic.value_with(target, &tr.sp, &[a as f64]))
                    .sum(),
                PolicyNet::GaussianTanh(p) => {
                    let a = p.sample_with(&p.gaussian(&space.encode(&tr.sp)), rng).action;
                    critic.value_with(target, &tr.sp, &a)
                }
            }
        };
        let y = tr.r + gamma * next;
        let tape = critic.net.forward_tape(&critic.features(&tr.s, &tr.a));
        let err = tape.output()[0] - y;
        total += err * err;
        critic.net.backward(&tape, &[2.0 * err / n], &mut grads)?;
    }
    q.optimizer.step(q.critic.net.params_mut(), &grads);
    q.target.update(&q.critic.net);
    Ok(total / n)
}

/// Relative slack of the Q-ceiling monitor.
pub const CEILING_MARGIN: f64 = 0.05;

/// Largest value of any policy when rewards lie in `[0, 1]`.
pub fn value_ceiling(gamma: f64) -> f64 {
    1.0 / (1.0 - gamma)
}

/// Q-ceiling monitor: true when a learned value exceeds the ceiling by more
/// than [`CEILING_MARGIN`].
pub fn above_ceiling(max_q: f64, gamma: f64) -> bool {
    max_q > (1.0 + CEILING_MARGIN) * value_ceiling(gamma)
}

/// Seed for the evaluation at a given step of a run.
pub fn eval_seed(run_seed: u64, step: usize) -> u64 {
    run_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Undiscounted returns of `episodes` rollouts of `horizon` steps (or until a
/// terminal), without per-step truncation.
pub fn evaluate(env: &dyn Environment, policy: &PolicyNet, episodes: usize, horizon: usize, seed: u64) -> Vec<f64> {
    use crate::mdp::Policy;
    let mut seeder = Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..episodes).map(|_| seeder.random()).collect();
    seeds
        .par_iter()
        .map(|&ep_seed| {
            let mut rng = Rng::seed_from_u64(ep_seed);
            let mut s = env.reset(&mut rng);
            let mut ret = 0.0;
            for _ in 0..horizon {
                let a = policy.sample(&s, &mut rng);
                let step = env.step(&s, &a, &mut rng);
                ret += step.reward;
                if step.done {
                    break;
                }
                s = step.next_state;
            }
            ret
        })
        .collect()
}

/// Summary written as the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbacReport {
    pub mode: AblationMode,
    pub seed: u64,
    pub m_steps: usize,
    pub n_steps: usize,
    pub final_eval_mean: Option<f64>,
    pub final_eval_min: Option<f64>,
    /// Exact discounted return of the learned policy (tabular tasks).
    pub oracle_return: Option<f64>,
    /// Exact discounted return of the cloned behavior policy (tabular tasks).
    pub behavior_oracle_return: Option<f64>,
    pub max_q_mu: f64,
    /// Largest prediction of the learned-policy critic (second ablation only).
    pub max_q_pi: Option<f64>,
    pub ratio_bandwidth: Option<f64>,
    pub importance_floor_hits: usize,
    pub bc_clamped_actions: usize,
}

/// Trained models and report.
#[derive(Debug, Clone)]
pub struct SbacOutcome {
    pub policy: PolicyNet,
    pub behavior: PolicyNet,
    pub q_mu: Critic,
    pub ratio: Option<crate::ratio::RatioModel>,
    pub q_pi: Option<Critic>,
    pub evaluations: Vec<EvalRecord>,
    pub report: SbacReport,
}

/// Phase one followed by `n_steps` iterations of (ratio update, policy
/// update). Evaluations run every `eval_interval` iterations and after the
/// last one when `env` is given. Everything is determined by `cfg.seed`.
pub fn train_sbac(
    env: Option<&dyn Environment>,
    data: &TrainingData,
    cfg: &RunConfig,
    obs: &mut dyn Observer,
) -> Result<SbacOutcome> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let phase_one = train_phase_one(data, cfg, &mut rng, obs)?;
    let behavior = phase_one.behavior.policy;
    let q_mu = phase_one.q.critic.clone();
    let m = cfg.m_steps;
    for (name, net) in [("behavior", behavior.net()), ("q_mu", &q_mu.net)] {
        obs.checkpoint(&Checkpoint::of(m, name, net))?;
    }

    let mut policy = PolicyNet::for_spaces(data.state_space, data.action_space, hidden_for(cfg), &mut rng);
    let mut actor_opt = Adam::new(policy.net().n_params(), cfg.actor_lr);
    let mut ratio = match cfg.mode {
        AblationMode::Full => Some(RatioTrainer::for_data(data, cfg, &mut rng)?),
        _ => None,
    };
    let mut q_pi = match cfg.mode {
        AblationMode::Ablation2 => Some(QEstimate::new(q_mu.clone(), cfg.critic_lr, cfg.tau)),
        _ => None,
    };
    let mut q_pi_guard = DivergenceGuard::new("q_pi_loss", cfg.divergence_factor);
    let mut policy_guard = DivergenceGuard::new("policy_loss", cfg.divergence_factor);
    let mut max_q_pi = f64::NEG_INFINITY;
    let mut floor_hits = 0;
    let mut evaluations = Vec::new();
    let mut last_mmd = None;

    for iter in 1..=cfg.n_steps {
        let step = m + iter;
        let idx = data.sample_indices(cfg.batch_size, &mut rng)?;
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &data.items[i]).collect();
        let states: Vec<&[f64]> = batch.iter().map(|tr| tr.s.as_slice()).collect();

        let mut weights = vec![1.0; batch.len()];
        if let Some(trainer) = ratio.as_mut() {
            if (iter - 1) % cfg.ratio_every == 0 {
                let out = trainer.step(&policy, &behavior, data, &idx, cfg)?;
                floor_hits += out.clamped;
                last_mmd = Some(out.loss);
            }
            let w: Vec<f64> = batch.iter().map(|tr| trainer.model.w(data.state(tr.s_key))).collect();
            weights = normalize_mean(&w);
        }
        let critic = match q_pi.as_mut() {
            Some(q) => {
                let loss = q_pi_step(q, &policy, &batch, cfg.gamma, &mut rng)?;
                q_pi_guard.check(step, loss)?;
                max_q_pi = max_q_pi.max(q.max_on(&batch));
                &q.critic
            }
            None => &q_mu,
        };
        let lg = policy_loss(&policy, critic, &behavior, &states, &weights, cfg.alpha, &mut rng)?;
        policy_guard.check(step, lg.loss.abs())?;
        actor_opt.step(policy.net_mut().params_mut(), &lg.grads);

        let mut row = None;
        if iter % cfg.log_interval == 0 || iter == cfg.n_steps {
            row = Some(MetricsRow { step, mmd_loss: last_mmd, policy_loss: Some(lg.loss), ..Default::default() });
        }
        if let Some(env) = env {
            if iter % cfg.eval_interval == 0 || iter == cfg.n_steps {
                let seed = eval_seed(cfg.seed, step);
                let record = EvalRecord { step, seed, returns: evaluate(env, &policy, cfg.eval_episodes, cfg.eval_horizon, seed) };
                obs.evaluation(&record)?;
                let r = row.get_or_insert_with(|| MetricsRow { step, ..Default::default() });
                r.eval_return_mean = Some(record.mean());
                r.eval_return_min = Some(record.min());
                evaluations.push(record);
            }
        }
        if let Some(r) = row {
            obs.metrics(&r)?;
        }
        if cfg.checkpoint_interval > 0 && iter % cfg.checkpoint_interval == 0 && iter != cfg.n_steps {
            obs.checkpoint(&Checkpoint::of(step, "policy", policy.net()))?;
        }
    }

    let end = m + cfg.n_steps;
    obs.checkpoint(&Checkpoint::of(end, "policy", policy.net()))?;
    if let Some(t) = &ratio {
        obs.checkpoint(&Checkpoint::of(end, "ratio", &t.model.net))?;
    }
    if let Some(q) = &q_pi {
        obs.checkpoint(&Checkpoint::of(end, "q_pi", &q.critic.net))?;
    }

    let mdp = env.and_then(|e| e.as_tabular());
    let oracle = |p: &PolicyNet| -> Result<Option<f64>> {
        match (mdp, p.to_tabular()) {
            (Some(mdp), Some(table)) => Ok(Some(exact_return(mdp, &table)?)),
            _ => Ok(None),
        }
    };
    let report = SbacReport {
        mode: cfg.mode,
        seed: cfg.seed,
        m_steps: cfg.m_steps,
        n_steps: cfg.n_steps,
        final_eval_mean: evaluations.last().map(EvalRecord::mean),
        final_eval_min: evaluations.last().map(EvalRecord::min),
        oracle_return: oracle(&policy)?,
        behavior_oracle_return: oracle(&behavior)?,
        max_q_mu: phase_one.max_q,
        max_q_pi: q_pi.as_ref().map(|_| max_q_pi),
        ratio_bandwidth: ratio.as_ref().and_then(|t| t.kernel.map(|k| k.bandwidth)),
        importance_floor_hits: floor_hits,
        bc_clamped_actions: phase_one.clamped_actions,
    };
    Ok(SbacOutcome {
        policy,
        behavior,
        q_mu,
        ratio: ratio.map(|t| t.model),
        q_pi: q_pi.map(|q| q.critic),
        evaluations,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::{central_difference, max_relative_error};
    use crate::estimators::CriticInput;
    use crate::harness::Recorder;
    use crate::mdp::registry::{dataset_for, make_env};
    use crate::mdp::{TabularMdp, TabularPolicy};

    const NS: usize = 4;
    const NA: usize = 3;

    fn random_rows(rng: &mut Rng) -> TabularPolicy {
        let rows: Vec<Vec<f64>> = (0..NS)
            .map(|_| {
                let r: Vec<f64> = (0..NA).map(|_| rng.random_range(0.1..1.0)).collect();
                let z: f64 = r.iter().sum();
                r.iter().map(|x| x / z).collect()
            })
            .collect();
        TabularPolicy::from_rows(&rows).unwrap()
    }

    fn randomize(net: &mut crate::approx::Mlp, rng: &mut Rng) {
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
    }

    fn discrete_setup(seed: u64) -> (PolicyNet, Critic, TabularPolicy, Vec<[f64; 1]>, Vec<f64>) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut pi = PolicyNet::for_spaces(Space::Discrete(NS), Space::Discrete(NA), &[5], &mut rng);
        randomize(pi.net_mut(), &mut rng);
        let q: Vec<f64> = (0..NS * NA).map(|_| rng.random_range(0.0..10.0)).collect();
        let critic = Critic::from_table(NS, NA, &q).unwrap();
        let mu = random_rows(&mut rng);
        let states: Vec<[f64; 1]> = (0..8).map(|_| [rng.random_range(0..NS) as f64]).collect();
        let weights: Vec<f64> = states.iter().map(|_| rng.random_range(0.2..3.0)).collect();
        (pi, critic, mu, states, weights)
    }

    fn expected(pi: &PolicyNet, s: &[f64], f: impl Fn(usize) -> f64) -> f64 {
        let PolicyNet::Categorical(p) = pi else { unreachable!() };
        p.probs(&pi.state_space().encode(s)).iter().enumerate().map(|(a, pa)| pa * f(a)).sum()
    }

    #[test]
    fn alpha_zero_unit_weights_is_negative_mean_q() {
        let (pi, critic, mu, states, _) = discrete_setup(1);
        let ones = vec![1.0; states.len()];
        let lg = policy_loss(&pi, &critic, &mu, &states, &ones, 0.0, &mut Rng::seed_from_u64(0)).unwrap();
        let want = -states.iter().map(|s| expected(&pi, s, |a| critic.value(s, &[a as f64]))).sum::<f64>()
            / states.len() as f64;
        assert!((lg.loss - want).abs() < 1e-12);
    }

    #[test]
    fn zero_critic_reduces_to_behavior_cross_entropy() {
        let (pi, _, mu, states, weights) = discrete_setup(2);
        let zero = Critic::from_table(NS, NA, &[0.0; NS * NA]).unwrap();
        let lg = policy_loss(&pi, &zero, &mu, &states, &weights, 1.0, &mut Rng::seed_from_u64(0)).unwrap();
        let want = -states
            .iter()
            .map(|s| expected(&pi, s, |a| mu.prob(index(s), a).ln()))
            .sum::<f64>()
            / states.len() as f64;
        assert!((lg.loss - want).abs() < 1e-12);
    }

    fn index(s: &[f64]) -> usize {
        s[0] as usize
    }

    #[test]
    fn discrete_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let (pi, critic, mu, states, weights) = discrete_setup(100 + seed);
            let lg = policy_loss(&pi, &critic, &mu, &states, &weights, 0.5, &mut Rng::seed_from_u64(0)).unwrap();
            let x = pi.net().params().to_vec();
            let fd = central_difference(
                |p| {
                    let mut trial = pi.clone();
                    trial.net_mut().set_params(p);
                    policy_loss(&trial, &critic, &mu, &states, &weights, 0.5, &mut Rng::seed_from_u64(0)).unwrap().loss
                },
                &x,
                1e-6,
            );
            let err = max_relative_error(&lg.grads, &fd, 1e-6);
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn continuous_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut rng = Rng::seed_from_u64(200 + seed);
            let (ss, aspace) = (Space::Box(2), Space::Box(1));
            let mut pi = PolicyNet::for_spaces(ss, aspace, &[6], &mut rng);
            randomize(pi.net_mut(), &mut rng);
            let mu = PolicyNet::for_spaces(ss, aspace, &[6], &mut rng);
            let mut critic = Critic::new(ss, aspace, CriticInput::Concat, &[6], &mut rng).unwrap();
            randomize(&mut critic.net, &mut rng);
            let states: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let weights: Vec<f64> = states.iter().map(|_| rng.random_range(0.2..3.0)).collect();
            let loss_at = |p: &PolicyNet| {
                policy_loss(p, &critic, &mu, &states, &weights, 0.5, &mut Rng::seed_from_u64(seed)).unwrap()
            };
            let lg = loss_at(&pi);
            assert_eq!(lg.clamped, 0);
            let x = pi.net().params().to_vec();
            let fd = central_difference(
                |p| {
                    let mut trial = pi.clone();
                    trial.net_mut().set_params(p);
                    loss_at(&trial).loss
                },
                &x,
                1e-6,
            );
            let err = max_relative_error(&lg.grads, &fd, 1e-5);
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn uniform_policy_on_flat_landscape_is_stationary() {
        let mut rng = Rng::seed_from_u64(3);
        let pi = PolicyNet::for_spaces(Space::Discrete(NS), Space::Discrete(NA), &[], &mut rng);
        let flat = Critic::from_table(NS, NA, &[2.0; NS * NA]).unwrap();
        let mu = TabularPolicy::uniform(NS, NA);
        let states: Vec<[f64; 1]> = (0..NS).map(|s| [s as f64]).collect();
        let lg = policy_loss(&pi, &flat, &mu, &states, &[1.0; NS], 0.5, &mut rng).unwrap();
        assert!(lg.grads.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn mismatched_weights_rejected() {
        let (pi, critic, mu, states, _) = discrete_setup(4);
        assert!(policy_loss(&pi, &critic, &mu, &states, &[1.0], 0.5, &mut Rng::seed_from_u64(0)).is_err());
        let empty: [[f64; 1]; 0] = [];
        assert!(policy_loss(&pi, &critic, &mu, &empty, &[], 0.5, &mut Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn decomposition_argmax_and_effective_alpha() {
        for seed in 0..20 {
            let (pi, critic, mu, _, _) = discrete_setup(300 + seed);
            let states: Vec<[f64; 1]> = (0..NS).map(|s| [s as f64]).collect();
            let weights = [0.25, 0.5, 2.0, 4.0];
            let mut rng = Rng::seed_from_u64(seed);
            let d = soft_regularization_decomposition(&pi, &critic, &mu, &states, &weights, 0.5, &mut rng).unwrap();
            assert!(d.argmax_agrees);
            assert!(d.effective_alpha.windows(2).all(|w| w[0] > w[1]));
            assert!(d.value_term > 0.0 && d.penalty_term > 0.0);
        }
        let (pi, critic, mu, states, _) = discrete_setup(5);
        let zero = vec![0.0; states.len()];
        assert!(soft_regularization_decomposition(&pi, &critic, &mu, &states, &zero, 0.5, &mut Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn candidate_grid_in_one_dimension() {
        let c = candidate_actions(Space::Box(1), &mut Rng::seed_from_u64(0));
        assert_eq!(c.len(), 100);
        assert_eq!(c[0], vec![-0.99]);
        assert!((c[99][0] - 0.99).abs() < 1e-12);
        assert_eq!(candidate_actions(Space::Discrete(3), &mut Rng::seed_from_u64(0)).len(), 3);
    }

    #[test]
    fn q_pi_step_reaches_geometric_value() {
        let env = crate::mdp::TabularEnv::new("single", crate::mdp::TabularMdp::single_state(1.0, 0.9).unwrap(), 50, 0.0);
        let ds = crate::mdp::rollout(&env, &TabularPolicy::uniform(1, 1), "uniform", 4, 0).unwrap();
        let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let pi = PolicyNet::for_spaces(Space::Discrete(1), Space::Discrete(1), &[], &mut rng);
        let mut q = QEstimate::new(Critic::from_table(1, 1, &[0.0]).unwrap(), 0.05, 0.05);
        for _ in 0..4000 {
            let idx = data.sample_indices(8, &mut rng).unwrap();
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &data.items[i]).collect();
            q_pi_step(&mut q, &pi, &batch, 0.9, &mut rng).unwrap();
        }
        let v = q.critic.value(&[0.0], &[0.0]);
        assert!((v - 10.0).abs() < 0.1, "v = {v}");
    }

    #[test]
    fn ceiling_monitor() {
        assert!((value_ceiling(0.99) - 100.0).abs() < 1e-9);
        assert!(!above_ceiling(104.0, 0.99));
        assert!(above_ceiling(106.0, 0.99));
    }

    #[test]
    fn evaluation_is_seeded() {
        let env = make_env("chain", 0.99).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let pi = PolicyNet::for_spaces(env.state_space(), env.action_space(), &[4], &mut rng);
        let a = evaluate(env.as_ref(), &pi, 6, 30, 11);
        assert_eq!(a, evaluate(env.as_ref(), &pi, 6, 30, 11));
        assert_eq!(a.len(), 6);
        assert_ne!(eval_seed(0, 1000), eval_seed(0, 2000));
        assert_ne!(eval_seed(1, 1000), eval_seed(2, 1000));
    }

    fn small_cfg(mode: AblationMode) -> RunConfig {
        RunConfig {
            env: "chain".into(),
            data_episodes: 20,
            mode,
            tabular: true,
            batch_size: 32,
            m_steps: 200,
            n_steps: 200,
            critic_lr: 0.05,
            behavior_lr: 0.01,
            actor_lr: 0.01,
            ratio_lr: 0.003,
            eval_interval: 100,
            log_interval: 50,
            eval_episodes: 3,
            eval_horizon: 30,
            ..Default::default()
        }
    }

    #[test]
    fn training_is_deterministic_for_every_mode() {
        for mode in [AblationMode::Full, AblationMode::Ablation1, AblationMode::Ablation2] {
            let cfg = small_cfg(mode);
            let (env, ds) = dataset_for(&cfg).unwrap();
            let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
            let run = || {
                let mut rec = Recorder::default();
                let out = train_sbac(Some(env.as_ref()), &data, &cfg, &mut rec).unwrap();
                (rec, out.report)
            };
            let (a, ra) = run();
            let (b, rb) = run();
            assert_eq!(a.rows, b.rows);
            assert_eq!(a.evaluations, b.evaluations);
            assert_eq!(ra, rb);
            assert_eq!(a.evaluations.len(), 2);
            assert!(ra.oracle_return.is_some());
            assert_eq!(ra.max_q_pi.is_some(), mode == AblationMode::Ablation2);
            assert_eq!(ra.ratio_bandwidth.is_some(), mode == AblationMode::Full);
            let names: Vec<&str> = a.checkpoints.iter().map(|c| c.name.as_str()).collect();
            assert!(names.contains(&"behavior") && names.contains(&"q_mu") && names.contains(&"policy"));
        }
    }

    #[test]
    fn zero_policy_steps_checkpoint_the_initial_policy() {
        let cfg = RunConfig { n_steps: 0, ..small_cfg(AblationMode::Full) };
        let (env, ds) = dataset_for(&cfg).unwrap();
        let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
        let mut rec = Recorder::default();
        let out = train_sbac(Some(env.as_ref()), &data, &cfg, &mut rec).unwrap();
        assert!(out.evaluations.is_empty());
        let last = rec.checkpoints.iter().find(|c| c.name == "policy").unwrap();
        assert_eq!(last.step, cfg.m_steps);
        assert_eq!(&last.to_mlp().unwrap(), out.policy.net());
    }

    #[test]
    fn unit_ratio_ablation_is_the_weighted_loss_with_ones() {
        let (pi, critic, mu, states, _) = discrete_setup(7);
        let ones = vec![1.0; states.len()];
        let a = ablation_one_loss(&pi, &critic, &mu, &states, 0.5, &mut Rng::seed_from_u64(0)).unwrap();
        let b = policy_loss(&pi, &critic, &mu, &states, &ones, 0.5, &mut Rng::seed_from_u64(0)).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn barrier_dominated_limit_stays_within_behavior_tv() {
        let mdp = TabularMdp::gridworld(5, 0.1, 0.99).unwrap();
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mu = crate::mdp::behavior_policy(&mdp, crate::mdp::BehaviorTier::Expert);
        let critic = Critic::from_table(ns, na, &crate::oracle::exact_q_mu(&mdp, &mu).unwrap().q).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let mut pi = PolicyNet::for_spaces(Space::Discrete(ns), Space::Discrete(na), &[], &mut rng);
        let mut opt = Adam::new(pi.net().n_params(), 0.05);
        let states: Vec<[f64; 1]> = (0..ns).map(|s| [s as f64]).collect();
        for _ in 0..3000 {
            let lg = ablation_one_loss(&pi, &critic, &mu, &states, 1e3, &mut rng).unwrap();
            opt.step(pi.net_mut().params_mut(), &lg.grads);
        }
        let learned = pi.to_tabular().unwrap();
        let worst = (0..ns).map(|s| learned.tv_at(&mu, s)).fold(0.0, f64::max);
        assert!(worst <= 0.05, "max per-state TV {worst}");
    }
}
