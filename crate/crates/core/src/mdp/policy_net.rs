use super::{index_of, sample_categorical, Policy, Space, TabularPolicy};
use crate::approx::Mlp;
use crate::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Actions are clamped to `[-TANH_CLAMP, TANH_CLAMP]` before `atanh`.
pub const TANH_CLAMP: f64 = 1.0 - 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Action log-density keyed by encoded state features.
pub trait ActionDensity: Sync {
    fn log_density(&self, feats: &[f64], action: &[f64]) -> f64;

    /// Gradient of [`ActionDensity::log_density`] with respect to a continuous
    /// action. Discrete densities return an empty vector.
    fn log_density_action_grad(&self, feats: &[f64], action: &[f64]) -> Vec<f64>;
}

/// Softmax policy over a discrete action set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalPolicy {
    pub state_space: Space,
    pub n_actions: usize,
    pub net: Mlp,
}

impl CategoricalPolicy {
    pub fn new(state_space: Space, n_actions: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let sizes = layer_sizes(state_space.encoded_dim(), hidden, n_actions);
        Self { state_space, n_actions, net: Mlp::new(&sizes, 0.01, rng) }
    }

    pub fn probs(&self, feats: &[f64]) -> Vec<f64> {
        softmax(&self.net.eval(feats))
    }

    /// Rounds the network to an explicit table over a discrete state space.
    pub fn to_tabular(&self) -> Option<TabularPolicy> {
        let Space::Discrete(n) = self.state_space else { return None };
        let rows: Vec<Vec<f64>> =
            (0..n).map(|s| self.probs(&self.state_space.encode(&[s as f64]))).collect();
        TabularPolicy::from_rows(&rows).ok()
    }
}

/// Diagonal Gaussian squashed by `tanh` onto `[-1, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTanhPolicy {
    pub state_space: Space,
    pub action_dim: usize,
    /// Outputs `[mean; log_std]`.
    pub net: Mlp,
}

/// Pre-squash Gaussian parameters for one state.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// False where the raw log-std was clamped (zero gradient there).
    pub log_std_free: Vec<bool>,
}

/// A reparameterized draw `a = tanh(mean + std * noise)`.
#[derive(Debug, Clone)]
pub struct SquashedSample {
    pub action: Vec<f64>,
    pub pre_tanh: Vec<f64>,
    pub noise: Vec<f64>,
}

impl GaussianTanhPolicy {
    pub fn new(state_space: Space, action_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let sizes = layer_sizes(state_space.encoded_dim(), hidden, 2 * action_dim);
        Self { state_space, action_dim, net: Mlp::new(&sizes, 0.01, rng) }
    }

    pub fn params_from_output(&self, out: &[f64]) -> GaussianParams {
        let d = self.action_dim;
        let mean = out[..d].to_vec();
        let raw = &out[d..2 * d];
        GaussianParams {
            mean,
            log_std: raw.iter().map(|x| x.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
            log_std_free: raw.iter().map(|x| (LOG_STD_MIN..=LOG_STD_MAX).contains(x)).collect(),
        }
    }

    pub fn gaussian(&self, feats: &[f64]) -> GaussianParams {
        self.params_from_output(&self.net.eval(feats))
    }

    pub fn sample_with(&self, params: &GaussianParams, rng: &mut Rng) -> SquashedSample {
        let noise: Vec<f64> =
            (0..self.action_dim).map(|_| StandardNormal.sample(rng)).collect();
        let pre_tanh: Vec<f64> = (0..self.action_dim)
            .map(|i| params.mean[i] + params.log_std[i].exp() * noise[i])
            .collect();
        let action = pre_tanh.iter().map(|u| u.tanh()).collect();
        SquashedSample { action, pre_tanh, noise }
    }

    /// Log-density of a squashed action, including the `tanh` Jacobian. Also
    /// returns the gradient with respect to the raw network output.
    pub fn log_prob_and_output_grad(&self, params: &GaussianParams, action: &[f64]) -> (f64, Vec<f64>) {
        let d = self.action_dim;
        let mut lp = 0.0;
        let mut grad = vec![0.0; 2 * d];
        for i in 0..d {
            let a = action[i].clamp(-TANH_CLAMP, TANH_CLAMP);
            let u = a.atanh();
            let std = params.log_std[i].exp();
            let z = (u - params.mean[i]) / std;
            lp += -0.5 * z * z - params.log_std[i] - HALF_LN_2PI - (1.0 - a * a).ln();
            grad[i] = z / std;
            if params.log_std_free[i] {
                grad[d + i] = z * z - 1.0;
            }
        }
        (lp, grad)
    }
}

fn log_prob_action_grad(params: &GaussianParams, action: &[f64]) -> Vec<f64> {
    action
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            if a.abs() > TANH_CLAMP {
                return 0.0;
            }
            let u = a.atanh();
            let var = (2.0 * params.log_std[i]).exp();
            let jac = 1.0 / (1.0 - a * a);
            -(u - params.mean[i]) / var * jac + 2.0 * a * jac
        })
        .collect()
}

pub(crate) fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(hidden.len() + 2);
    sizes.push(input);
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// A learned policy over either kind of action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyNet {
    Categorical(CategoricalPolicy),
    GaussianTanh(GaussianTanhPolicy),
}

impl PolicyNet {
    /// Categorical for discrete actions, tanh-Gaussian for boxes.
    pub fn for_spaces(state: Space, action: Space, hidden: &[usize], rng: &mut Rng) -> Self {
        match action {
            Space::Discrete(n) => PolicyNet::Categorical(CategoricalPolicy::new(state, n, hidden, rng)),
            Space::Box(d) => PolicyNet::GaussianTanh(GaussianTanhPolicy::new(state, d, hidden, rng)),
        }
    }

    pub fn net(&self) -> &Mlp {
        match self {
            PolicyNet::Categorical(p) => &p.net,
            PolicyNet::GaussianTanh(p) => &p.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        match self {
            PolicyNet::Categorical(p) => &mut p.net,
            PolicyNet::GaussianTanh(p) => &mut p.net,
        }
    }

    pub fn state_space(&self) -> Space {
        match self {
            PolicyNet::Categorical(p) => p.state_space,
            PolicyNet::GaussianTanh(p) => p.state_space,
        }
    }

    pub fn action_space(&self) -> Space {
        match self {
            PolicyNet::Categorical(p) => Space::Discrete(p.n_actions),
            PolicyNet::GaussianTanh(p) => Space::Box(p.action_dim),
        }
    }

    /// Log-likelihood of `action` and its gradient with respect to the network
    /// parameters, accumulated into `grads` scaled by `scale`.
    pub fn log_prob_accumulate(&self, feats: &[f64], action: &[f64], scale: f64, grads: &mut [f64]) -> f64 {
        let net = self.net();
        let tape = net.forward_tape(feats);
        let (lp, out_grad) = match self {
            PolicyNet::Categorical(_) => {
                let p = softmax(tape.output());
                let a = index_of(action);
                let mut g: Vec<f64> = p.iter().map(|pi| -pi).collect();
                g[a] += 1.0;
                (p[a].ln(), g)
            }
            PolicyNet::GaussianTanh(pol) => {
                let params = pol.params_from_output(tape.output());
                pol.log_prob_and_output_grad(&params, action)
            }
        };
        let scaled: Vec<f64> = out_grad.iter().map(|g| g * scale).collect();
        net.backward(&tape, &scaled, grads).expect("shapes fixed at construction");
        lp
    }

    /// Probability table over all states when both spaces are discrete.
    pub fn to_tabular(&self) -> Option<TabularPolicy> {
        match self {
            PolicyNet::Categorical(p) => p.to_tabular(),
            PolicyNet::GaussianTanh(_) => None,
        }
    }
}

impl ActionDensity for PolicyNet {
    fn log_density(&self, feats: &[f64], action: &[f64]) -> f64 {
        match self {
            PolicyNet::Categorical(p) => p.probs(feats)[index_of(action)].ln(),
            PolicyNet::GaussianTanh(p) => p.log_prob_and_output_grad(&p.gaussian(feats), action).0,
        }
    }

    fn log_density_action_grad(&self, feats: &[f64], action: &[f64]) -> Vec<f64> {
        match self {
            PolicyNet::Categorical(_) => Vec::new(),
            PolicyNet::GaussianTanh(p) => log_prob_action_grad(&p.gaussian(feats), action),
        }
    }
}

impl Policy for PolicyNet {
    fn action_space(&self) -> Space {
        PolicyNet::action_space(self)
    }

    fn sample(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        let feats = self.state_space().encode(state);
        match self {
            PolicyNet::Categorical(p) => vec![sample_categorical(&p.probs(&feats), rng) as f64],
            PolicyNet::GaussianTanh(p) => p.sample_with(&p.gaussian(&feats), rng).action,
        }
    }

    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        self.log_density(&self.state_space().encode(state), action)
    }
}

impl ActionDensity for TabularPolicy {
    /// Features must be a one-hot state encoding.
    fn log_density(&self, feats: &[f64], action: &[f64]) -> f64 {
        let s = feats.iter().position(|&x| x == 1.0).expect("one-hot state features");
        self.prob(s, index_of(action)).ln()
    }

    fn log_density_action_grad(&self, _feats: &[f64], _action: &[f64]) -> Vec<f64> {
        Vec::new()
    }
}
