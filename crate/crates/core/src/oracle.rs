//! Exact dense linear-algebra quantities on a [`TabularMdp`]: visitation,
//! values, returns, the performance-difference identity and its
//! importance-weighted form, visitation ratios, the backward flow operator and
//! the trust-region surrogate bound.
//!
//! Discounted visitation is normalized: `d(s) = (1 - g) sum_t g^t P(s_t = s)`.

use crate::mdp::{TabularMdp, TabularPolicy};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Largest state count the dense solvers accept.
pub const MAX_STATES: usize = 1000;

/// Visitation mass at or below this is treated as zero.
pub const ZERO_MASS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitationVector(pub Vec<f64>);

impl VisitationVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `Q`, `V` and `A = Q - V` of a fixed policy, row-major over `(s, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTables {
    pub n_actions: usize,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub advantage: Vec<f64>,
}

impl ValueTables {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.advantage[s * self.n_actions + a]
    }
}

/// Both sides of the performance-difference identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceDifference {
    /// `J(pi) - J(mu)`.
    pub lhs: f64,
    /// `(1 - g)^-1 E_{s ~ d_pi, a ~ pi} A_mu(s, a)`.
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateBoundReport {
    pub delta_exact: f64,
    pub surrogate_lower: f64,
    pub eps_mu: f64,
    pub tv_per_state: Vec<f64>,
}

impl SurrogateBoundReport {
    pub fn holds(&self) -> bool {
        self.surrogate_lower <= self.delta_exact + 1e-8
    }
}

fn check_shapes(mdp: &TabularMdp, policies: &[&TabularPolicy]) -> Result<()> {
    if mdp.n_states() > MAX_STATES {
        return Err(Error::InvalidInput(format!(
            "{} states exceeds the dense oracle limit of {MAX_STATES}",
            mdp.n_states()
        )));
    }
    for p in policies {
        if p.n_states() != mdp.n_states() || p.n_actions() != mdp.n_actions() {
            return Err(Error::InvalidInput("policy shape does not match the MDP".into()));
        }
    }
    Ok(())
}

/// State-to-state kernel `P_pi[s][s'] = sum_a pi(a|s) P(s'|s,a)`.
pub fn state_transition(mdp: &TabularMdp, pi: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.n_states();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (next, &q) in mdp.next_dist(s, a).iter().enumerate() {
                m[(s, next)] += p * q;
            }
        }
    }
    m
}

fn solve(a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    a.lu().solve(&b).ok_or_else(|| Error::Numerical("singular linear system".into()))
}

/// Solves `(I - g P_pi^T) d = (1 - g) rho`.
pub fn exact_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<VisitationVector> {
    check_shapes(mdp, &[pi])?;
    let n = mdp.n_states();
    let g = mdp.discount();
    let lhs = DMatrix::identity(n, n) - state_transition(mdp, pi).transpose() * g;
    let rhs = DVector::from_iterator(n, mdp.initial().iter().map(|p| (1.0 - g) * p));
    let d = solve(lhs, rhs)?;
    let total: f64 = d.iter().sum();
    Ok(VisitationVector(d.iter().map(|x| (x / total).max(0.0)).collect()))
}

/// Exact action values of `mu` from `(I - g P_mu) V = r_mu`, `Q = r + g P V`.
pub fn exact_q_mu(mdp: &TabularMdp, mu: &TabularPolicy) -> Result<ValueTables> {
    check_shapes(mdp, &[mu])?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.discount();
    let r_mu = DVector::from_iterator(
        ns,
        (0..ns).map(|s| (0..na).map(|a| mu.prob(s, a) * mdp.r(s, a)).sum::<f64>()),
    );
    let lhs = DMatrix::identity(ns, ns) - state_transition(mdp, mu) * g;
    let v_next = solve(lhs, r_mu)?;
    let mut q = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let ev: f64 = mdp.next_dist(s, a).iter().zip(v_next.iter()).map(|(p, v)| p * v).sum();
            q[s * na + a] = mdp.r(s, a) + g * ev;
        }
    }
    let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| mu.prob(s, a) * q[s * na + a]).sum()).collect();
    let advantage = (0..ns * na).map(|i| q[i] - v[i / na]).collect();
    Ok(ValueTables { n_actions: na, q, v, advantage })
}

/// Optimal action values by value iteration to a sup-norm change below 1e-12.
pub fn optimal_q(mdp: &TabularMdp) -> Vec<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let g = mdp.discount();
    let mut v = vec![0.0; ns];
    let mut q = vec![0.0; ns * na];
    loop {
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mdp.next_dist(s, a).iter().zip(&v).map(|(p, x)| p * x).sum();
                q[s * na + a] = mdp.r(s, a) + g * ev;
            }
        }
        let mut change: f64 = 0.0;
        for s in 0..ns {
            let best = q[s * na..(s + 1) * na].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            change = change.max((best - v[s]).abs());
            v[s] = best;
        }
        if change < 1e-12 {
            return q;
        }
    }
}

/// `J(pi) = (1 - g)^-1 sum_{s,a} d_pi(s) pi(a|s) r(s,a)`.
pub fn exact_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let d = exact_visitation(mdp, pi)?;
    let total: f64 = (0..mdp.n_states())
        .map(|s| d.0[s] * (0..mdp.n_actions()).map(|a| pi.prob(s, a) * mdp.r(s, a)).sum::<f64>())
        .sum();
    Ok(total / (1.0 - mdp.discount()))
}

/// Per-state `E_{a ~ pi} A_mu(s, a)`.
fn expected_advantage(mdp: &TabularMdp, pi: &TabularPolicy, values: &ValueTables) -> Vec<f64> {
    (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| pi.prob(s, a) * values.advantage(s, a)).sum())
        .collect()
}

pub fn performance_difference_check(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
) -> Result<PerformanceDifference> {
    check_shapes(mdp, &[pi, mu])?;
    let lhs = exact_return(mdp, pi)? - exact_return(mdp, mu)?;
    let values = exact_q_mu(mdp, mu)?;
    let d_pi = exact_visitation(mdp, pi)?;
    let adv = expected_advantage(mdp, pi, &values);
    let rhs = d_pi.0.iter().zip(&adv).map(|(d, a)| d * a).sum::<f64>() / (1.0 - mdp.discount());
    Ok(PerformanceDifference { lhs, rhs })
}

/// The performance difference evaluated under `d_mu` with ratio weights.
pub fn importance_sampled_difference(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
) -> Result<f64> {
    check_shapes(mdp, &[pi, mu])?;
    let d_pi = exact_visitation(mdp, pi)?;
    let d_mu = exact_visitation(mdp, mu)?;
    let violations: Vec<usize> = (0..mdp.n_states())
        .filter(|&s| d_mu.0[s] <= ZERO_MASS && d_pi.0[s] > ZERO_MASS)
        .collect();
    if !violations.is_empty() {
        return Err(Error::Support { states: violations });
    }
    let values = exact_q_mu(mdp, mu)?;
    let adv = expected_advantage(mdp, pi, &values);
    let total: f64 = (0..mdp.n_states())
        .filter(|&s| d_mu.0[s] > ZERO_MASS)
        .map(|s| d_mu.0[s] * (d_pi.0[s] / d_mu.0[s]) * adv[s])
        .sum();
    Ok(total / (1.0 - mdp.discount()))
}

/// `w_pi(s) = d_pi(s) / d_mu(s)`; every state must carry behavior mass.
pub fn exact_ratio(mdp: &TabularMdp, pi: &TabularPolicy, mu: &TabularPolicy) -> Result<Vec<f64>> {
    check_shapes(mdp, &[pi, mu])?;
    let d_pi = exact_visitation(mdp, pi)?;
    let d_mu = exact_visitation(mdp, mu)?;
    let zero: Vec<usize> = (0..mdp.n_states()).filter(|&s| d_mu.0[s] <= ZERO_MASS).collect();
    if !zero.is_empty() {
        return Err(Error::Support { states: zero });
    }
    Ok(d_pi.0.iter().zip(&d_mu.0).map(|(p, m)| p / m).collect())
}

/// Backward flow operator with the time reversal taken under `d_mu`:
///
/// `T w(s') = [(1 - g) rho(s') + g sum_{s,a} d_mu(s) mu(a|s) P(s'|s,a) (pi/mu)(a|s) w(s)] / d_mu(s')`.
///
/// The first term is the initial-state injection; the second is the expected
/// reweighted ratio over predecessors `(s, a) | s'`. The ratio `w_pi` is its
/// unique fixed point.
pub fn apply_backward_flow_exact(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
    w: &[f64],
) -> Result<Vec<f64>> {
    check_shapes(mdp, &[pi, mu])?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if w.len() != ns {
        return Err(Error::InvalidInput("ratio vector has wrong length".into()));
    }
    let g = mdp.discount();
    let d_mu = exact_visitation(mdp, mu)?;
    let mut inflow: Vec<f64> = mdp.initial().iter().map(|p| (1.0 - g) * p).collect();
    let mut action_violations = Vec::new();
    for s in 0..ns {
        if d_mu.0[s] <= ZERO_MASS {
            continue;
        }
        for a in 0..na {
            let (p_pi, p_mu) = (pi.prob(s, a), mu.prob(s, a));
            if p_pi == 0.0 {
                continue;
            }
            if p_mu == 0.0 {
                action_violations.push(s);
                continue;
            }
            let mass = g * d_mu.0[s] * p_mu * (p_pi / p_mu) * w[s];
            for (next, &p) in mdp.next_dist(s, a).iter().enumerate() {
                inflow[next] += mass * p;
            }
        }
    }
    if !action_violations.is_empty() {
        action_violations.dedup();
        return Err(Error::Support { states: action_violations });
    }
    let starved: Vec<usize> = (0..ns).filter(|&s| d_mu.0[s] <= ZERO_MASS).collect();
    if !starved.is_empty() {
        return Err(Error::Support { states: starved });
    }
    Ok(inflow.iter().zip(&d_mu.0).map(|(f, d)| f / d).collect())
}

/// Trust-region style lower bound on `J(pi) - J(mu)` using per-state total
/// variation and `eps = max_s |E_pi A_mu(s, .)|`.
pub fn surrogate_bound(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
) -> Result<SurrogateBoundReport> {
    check_shapes(mdp, &[pi, mu])?;
    let g = mdp.discount();
    let values = exact_q_mu(mdp, mu)?;
    let adv = expected_advantage(mdp, pi, &values);
    let eps_mu = adv.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let tv: Vec<f64> = (0..mdp.n_states()).map(|s| pi.tv_at(mu, s)).collect();
    let d_mu = exact_visitation(mdp, mu)?;
    let penalty = 2.0 * g * eps_mu / (1.0 - g);
    let inner: f64 = (0..mdp.n_states()).map(|s| d_mu.0[s] * (adv[s] - penalty * tv[s])).sum();
    let delta_exact = exact_return(mdp, pi)? - exact_return(mdp, mu)?;
    Ok(SurrogateBoundReport {
        delta_exact,
        surrogate_lower: inner / (1.0 - g),
        eps_mu,
        tv_per_state: tv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{behavior_policy, BehaviorTier};
    use crate::Rng;
    use rand::SeedableRng;

    fn grid() -> TabularMdp {
        TabularMdp::gridworld(5, 0.1, 0.99).unwrap()
    }

    #[test]
    fn single_state_visitation_and_return() {
        let m = TabularMdp::single_state(1.0, 0.99).unwrap();
        let p = TabularPolicy::uniform(1, 1);
        assert_eq!(exact_visitation(&m, &p).unwrap().0, vec![1.0]);
        assert!((exact_return(&m, &p).unwrap() - 100.0).abs() < 1e-9);
        let v = exact_q_mu(&m, &p).unwrap();
        assert!((v.q[0] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn two_state_cycle_visitation() {
        let m = TabularMdp::two_state_cycle(1, 0.5).unwrap();
        let d = exact_visitation(&m, &TabularPolicy::uniform(2, 1)).unwrap();
        assert!((d.0[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((d.0[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_values_vanish() {
        let m = TabularMdp::gridworld(3, 0.1, 0.9).unwrap();
        let zero = TabularMdp::new(
            9,
            4,
            (0..9 * 4).flat_map(|sa| m.next_dist(sa / 4, sa % 4).to_vec()).collect(),
            vec![0.0; 36],
            m.initial().to_vec(),
            0.9,
        )
        .unwrap();
        let v = exact_q_mu(&zero, &TabularPolicy::uniform(9, 4)).unwrap();
        assert!(v.q.iter().chain(&v.advantage).all(|x| x.abs() < 1e-15));
        assert_eq!(exact_return(&zero, &TabularPolicy::uniform(9, 4)).unwrap(), 0.0);
    }

    #[test]
    fn value_tables_invariants_and_bellman_residual() {
        let m = grid();
        let mu = behavior_policy(&m, BehaviorTier::Medium);
        let v = exact_q_mu(&m, &mu).unwrap();
        for s in 0..25 {
            let mean_adv: f64 = (0..4).map(|a| mu.prob(s, a) * v.advantage(s, a)).sum();
            assert!(mean_adv.abs() < 1e-10);
            for a in 0..4 {
                let next: f64 = (0..25)
                    .map(|n| m.p(s, a, n) * (0..4).map(|b| mu.prob(n, b) * v.q(n, b)).sum::<f64>())
                    .sum();
                assert!((v.q(s, a) - m.r(s, a) - 0.99 * next).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn expert_beats_random() {
        let m = grid();
        let e = exact_return(&m, &behavior_policy(&m, BehaviorTier::Expert)).unwrap();
        let r = exact_return(&m, &behavior_policy(&m, BehaviorTier::Random)).unwrap();
        assert!(e > r);
    }

    #[test]
    fn identities_on_gridworld_pair() {
        let m = grid();
        let pi = behavior_policy(&m, BehaviorTier::Expert);
        let mu = behavior_policy(&m, BehaviorTier::Random);
        let pd = performance_difference_check(&m, &pi, &mu).unwrap();
        assert!((pd.lhs - pd.rhs).abs() < 1e-9);
        let is = importance_sampled_difference(&m, &pi, &mu).unwrap();
        assert!((is - pd.lhs).abs() < 1e-9);

        let w = exact_ratio(&m, &pi, &mu).unwrap();
        let d_mu = exact_visitation(&m, &mu).unwrap();
        let mean: f64 = w.iter().zip(&d_mu.0).map(|(a, b)| a * b).sum();
        assert!((mean - 1.0).abs() < 1e-10);
        let tw = apply_backward_flow_exact(&m, &pi, &mu, &w).unwrap();
        let gap = tw.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "fixed point gap {gap}");
    }

    #[test]
    fn identical_policies() {
        let m = grid();
        let mu = behavior_policy(&m, BehaviorTier::Medium);
        let pd = performance_difference_check(&m, &mu, &mu).unwrap();
        assert!(pd.lhs.abs() < 1e-12 && pd.rhs.abs() < 1e-9);
        assert!(importance_sampled_difference(&m, &mu, &mu).unwrap().abs() < 1e-9);
        let w = exact_ratio(&m, &mu, &mu).unwrap();
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-9));
        let tw = apply_backward_flow_exact(&m, &mu, &mu, &vec![1.0; 25]).unwrap();
        assert!(tw.iter().all(|x| (x - 1.0).abs() < 1e-9));
        let b = surrogate_bound(&m, &mu, &mu).unwrap();
        assert!(b.delta_exact.abs() < 1e-12 && b.surrogate_lower.abs() < 1e-9);
    }

    #[test]
    fn two_state_ratio_by_hand() {
        // pi always swaps, mu always stays; rho = [1, 0], g = 0.5.
        let m = TabularMdp::two_state_cycle(2, 0.5).unwrap();
        let pi = TabularPolicy::new(2, 2, vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        let mu = TabularPolicy::new(2, 2, vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        // d_pi: state 0 w.p. 1/2 swaps. Hand solve of
        // d0 = 0.5 + 0.5 (0.5 d0 + d1), d1 = 0.5 (0.5 d0).
        let d_pi = [0.5 / (1.0 - 0.25 - 0.125), 0.25 * 0.5 / (1.0 - 0.25 - 0.125)];
        // d_mu: d0 = 0.5 + 0.5 (0.8 d0 + 0.5 d1), d1 = 0.5 (0.2 d0 + 0.5 d1).
        // => d1 = 0.1 d0 / 0.75, d0 (1 - 0.4 - 0.25 * 0.1 / 0.75) = 0.5.
        let d0 = 0.5 / (1.0 - 0.4 - 0.25 * 0.1 / 0.75);
        let d_mu = [d0, 0.1 * d0 / 0.75];
        let w = exact_ratio(&m, &pi, &mu).unwrap();
        assert!((w[0] - d_pi[0] / d_mu[0]).abs() < 1e-12);
        assert!((w[1] - d_pi[1] / d_mu[1]).abs() < 1e-12);
    }

    #[test]
    fn constant_non_fixed_point_moves() {
        let m = grid();
        let pi = behavior_policy(&m, BehaviorTier::Expert);
        let mu = behavior_policy(&m, BehaviorTier::Random);
        let tw = apply_backward_flow_exact(&m, &pi, &mu, &vec![1.0; 25]).unwrap();
        assert!(tw.iter().any(|x| (x - 1.0).abs() > 1e-3));
    }

    fn with_unreachable_state() -> (TabularMdp, TabularPolicy, TabularPolicy) {
        // Three-state chain, no slip: mu never moves right from 0, pi does.
        let m = TabularMdp::chain(3, 0.0, 0.9).unwrap();
        let mu = TabularPolicy::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let pi = TabularPolicy::uniform(3, 2);
        (m, pi, mu)
    }

    #[test]
    fn support_violations_are_reported() {
        let (m, pi, mu) = with_unreachable_state();
        match importance_sampled_difference(&m, &pi, &mu) {
            Err(Error::Support { states }) => assert_eq!(states, vec![1, 2]),
            other => panic!("expected support error, got {other:?}"),
        }
        assert!(matches!(exact_ratio(&m, &pi, &mu), Err(Error::Support { .. })));
        assert!(apply_backward_flow_exact(&m, &pi, &mu, &[1.0; 3]).is_err());
    }

    #[test]
    fn bound_holds_and_is_loose_far_from_mu() {
        let m = grid();
        let pi = behavior_policy(&m, BehaviorTier::Expert);
        let mu = behavior_policy(&m, BehaviorTier::Random);
        let b = surrogate_bound(&m, &pi, &mu).unwrap();
        assert!(b.holds());
        assert!(b.surrogate_lower < b.delta_exact - 1.0);
    }

    #[test]
    fn bound_is_tight_near_mu() {
        let m = grid();
        let mu = behavior_policy(&m, BehaviorTier::Medium);
        let expert = behavior_policy(&m, BehaviorTier::Expert);
        let pi = TabularPolicy::mixture(&expert, &mu, 1e-4).unwrap();
        let b = surrogate_bound(&m, &pi, &mu).unwrap();
        assert!(b.tv_per_state.iter().all(|&tv| tv <= 0.05));
        assert!(b.holds());
        assert!((b.delta_exact - b.surrogate_lower) / b.delta_exact.abs() < 0.1, "{b:?}");
    }

    #[test]
    fn random_mdp_identity() {
        let mut rng = Rng::seed_from_u64(9);
        let m = TabularMdp::random(6, 3, 0.9, &mut rng).unwrap();
        let pi = TabularPolicy::uniform(6, 3);
        let mu = behavior_policy(&m, BehaviorTier::Medium);
        let pd = performance_difference_check(&m, &pi, &mu).unwrap();
        assert!((pd.lhs - pd.rhs).abs() < 1e-9);
    }
}
