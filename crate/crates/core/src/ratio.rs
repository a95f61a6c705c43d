//! Visitation-ratio estimation by kernel MMD between `w` and its backward
//! flow image.
//!
//! Both sides of the fixed-point condition are signed point measures over
//! states. With `n` transitions `(s_j, a_j, s'_j)` from the data and
//! `beta_j = pi(a_j|s_j) / mu(a_j|s_j)`:
//!
//! * [`MmdForm::Consistent`] puts mass `w(s_j)` at `s_j` on one side and mass
//!   `gamma beta_j w(s_j)` at `s'_j` plus `1 - gamma` at the episode's first
//!   state on the other. In expectation these are `d_mu w` and the flow
//!   `gamma P_pi^T (d_mu w) + (1 - gamma) rho`, which agree exactly at
//!   `w = d_pi / d_mu`.
//! * [`MmdForm::Literal`] places `w(s'_i)` at `s'_i` and
//!   `1 - gamma + gamma beta_j w(s_j)` at `s_j`. This does not vanish at the
//!   true ratio and is kept for comparison.
//!
//! The loss is `(1/n^2) sum_uv Delta_u k(x_u, x_v) Delta_v` over distinct
//! states, all pairs including `i = j`.

use crate::approx::{Adam, Mlp};
use crate::config::{KernelFamily, MmdEstimator, MmdForm, RunConfig};
use crate::data::{Prepared, TrainingData};
use crate::estimators::DivergenceGuard;
use crate::mdp::{ActionDensity, Space, TabularMdp, TabularPolicy};
use crate::oracle::exact_visitation;
use crate::{Error, Result, Rng};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl Kernel {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidInput(format!("kernel bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { family, bandwidth })
    }

    /// Gaussian `exp(-|x-y|^2 / (2 sigma^2))` or Laplacian `exp(-|x-y| / sigma)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        match self.family {
            KernelFamily::Gaussian => (-sq / (2.0 * self.bandwidth * self.bandwidth)).exp(),
            KernelFamily::Laplacian => (-sq.sqrt() / self.bandwidth).exp(),
        }
    }
}

pub fn kernel_matrix<P: AsRef<[f64]>>(a: &[P], b: &[P], kernel: &Kernel) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| kernel.eval(a[i].as_ref(), b[j].as_ref()))
}

/// Median of the nonzero pairwise distances, or 1 when all points coincide.
pub fn median_bandwidth<P: AsRef<[f64]>>(points: &[P]) -> f64 {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let sq: f64 = points[i].as_ref().iter().zip(points[j].as_ref()).map(|(a, b)| (a - b) * (a - b)).sum();
            if sq > 0.0 {
                d.push(sq.sqrt());
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    d[d.len() / 2]
}

/// `w(s) = exp(clamp(raw(s), -clip, clip))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub state_space: Space,
    pub clip: f64,
    pub net: Mlp,
}

impl RatioModel {
    /// Starts at `w = 1` everywhere.
    pub fn new(state_space: Space, hidden: &[usize], clip: f64, rng: &mut Rng) -> Self {
        let mut sizes = vec![state_space.encoded_dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { state_space, clip, net: Mlp::new(&sizes, 0.0, rng) }
    }

    /// Per-state table over a discrete space holding `ln w`.
    pub fn from_table(w: &[f64], clip: f64) -> Result<Self> {
        let mut params: Vec<f64> = w.iter().map(|x| x.ln()).collect();
        params.push(0.0);
        Ok(Self { state_space: Space::Discrete(w.len()), clip, net: Mlp::from_flat(&[w.len(), 1], params)? })
    }

    pub fn raw(&self, feats: &[f64]) -> f64 {
        self.net.eval(feats)[0]
    }

    pub fn log_w(&self, feats: &[f64]) -> f64 {
        self.raw(feats).clamp(-self.clip, self.clip)
    }

    pub fn w(&self, feats: &[f64]) -> f64 {
        self.log_w(feats).exp()
    }

    /// Accumulates `dl_dw * dw/dparams`; zero where the clamp is active.
    pub fn accumulate(&self, feats: &[f64], dl_dw: f64, grads: &mut [f64]) -> f64 {
        let tape = self.net.forward_tape(feats);
        let raw = tape.output()[0];
        let w = raw.clamp(-self.clip, self.clip).exp();
        if raw.abs() < self.clip && dl_dw != 0.0 {
            self.net.backward(&tape, &[dl_dw * w], grads).expect("shapes fixed");
        }
        w
    }
}

/// Ratios over a batch of encoded states, divided by their mean.
pub fn normalized_ratios<P: AsRef<[f64]>>(model: &RatioModel, states: &[P]) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::InvalidInput("empty state batch".into()));
    }
    let w: Vec<f64> = states.iter().map(|s| model.w(s.as_ref())).collect();
    Ok(normalize_mean(&w))
}

pub fn normalize_mean(w: &[f64]) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    w.iter().map(|x| x / mean).collect()
}

/// `pi(a|s) / max(mu(a|s), floor)` per batch item, with the number of floored
/// denominators.
pub fn importance_weights(
    pi: &dyn ActionDensity,
    mu: &dyn ActionDensity,
    data: &TrainingData,
    batch: &[usize],
    floor: f64,
) -> (Vec<f64>, usize) {
    let mut clamped = 0;
    let beta = batch
        .iter()
        .map(|&i| {
            let tr = &data.items[i];
            let feats = data.state(tr.s_key);
            let mu_p = mu.log_density(feats, &tr.a).exp();
            if mu_p < floor {
                clamped += 1;
            }
            pi.log_density(feats, &tr.a).exp() / mu_p.max(floor)
        })
        .collect();
    (beta, clamped)
}

#[derive(Debug, Clone)]
pub struct MmdOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Behavior densities raised to the floor.
    pub clamped: usize,
}

/// Everything but the models that the ratio loss needs.
#[derive(Debug, Clone, Copy)]
pub struct MmdBatch<'a> {
    pub data: &'a TrainingData,
    pub batch: &'a [usize],
    pub gamma: f64,
    pub kernel: &'a Kernel,
    pub form: MmdForm,
    pub floor: f64,
    /// Divide every weight by the batch mean of `w(s_j)` before forming the
    /// measures, pinning the scale of `w`.
    pub normalize: bool,
    pub estimator: MmdEstimator,
}

/// Signed measure accumulated on interned state keys.
#[derive(Default)]
struct Measure {
    slot: HashMap<usize, usize>,
    keys: Vec<usize>,
    mass: Vec<f64>,
}

impl Measure {
    fn add(&mut self, key: usize, m: f64) {
        let next = self.keys.len();
        let i = *self.slot.entry(key).or_insert(next);
        if i == next {
            self.keys.push(key);
            self.mass.push(0.0);
        }
        self.mass[i] += m;
    }

    /// `Delta^T K Delta` and `K Delta` keyed by state key.
    fn energy(&self, data: &TrainingData, kernel: &Kernel) -> (f64, HashMap<usize, f64>) {
        let pts: Vec<&[f64]> = self.keys.iter().map(|&k| data.state(k)).collect();
        let km = kernel_matrix(&pts, &pts, kernel);
        let delta = DVector::from_column_slice(&self.mass);
        let kd = &km * &delta;
        (delta.dot(&kd), self.keys.iter().cloned().zip(kd.iter().cloned()).collect())
    }
}

/// A point mass contributed by one transition: state key, signed mass, and
/// the mass's derivatives with respect to `w(s)` and `w(s')`.
struct Atom {
    key: usize,
    mass: f64,
    d_ws: f64,
    d_wsp: f64,
}

fn atoms(tr: &Prepared, form: MmdForm, gamma: f64, beta: f64, ws: f64, wsp: f64) -> Vec<Atom> {
    match form {
        MmdForm::Consistent => {
            let mut v = vec![Atom { key: tr.s_key, mass: ws, d_ws: 1.0, d_wsp: 0.0 }];
            if !tr.done {
                v.push(Atom { key: tr.sp_key, mass: -gamma * beta * ws, d_ws: -gamma * beta, d_wsp: 0.0 });
            }
            v.push(Atom { key: tr.s0_key, mass: -(1.0 - gamma), d_ws: 0.0, d_wsp: 0.0 });
            v
        }
        MmdForm::Literal => vec![
            Atom { key: tr.sp_key, mass: wsp, d_ws: 0.0, d_wsp: 1.0 },
            Atom { key: tr.s_key, mass: -(1.0 - gamma + gamma * beta * ws), d_ws: -gamma * beta, d_wsp: 0.0 },
        ],
    }
}

/// Ratio MMD on a minibatch, with its gradient in the ratio parameters.
pub fn mmd_loss(model: &RatioModel, pi: &dyn ActionDensity, mu: &dyn ActionDensity, b: &MmdBatch) -> Result<MmdOutput> {
    if b.batch.len() < 2 {
        return Err(Error::InvalidInput("ratio loss needs at least two transitions".into()));
    }
    let data = b.data;
    let n = b.batch.len() as f64;
    let (beta, clamped) = importance_weights(pi, mu, data, b.batch, b.floor);

    let mut w_at: HashMap<usize, f64> = HashMap::new();
    let mut w = |key: usize| *w_at.entry(key).or_insert_with(|| model.w(data.state(key)));
    let items: Vec<&Prepared> = b.batch.iter().map(|&i| &data.items[i]).collect();
    let raw_s: Vec<f64> = items.iter().map(|tr| w(tr.s_key)).collect();
    let raw_sp: Vec<f64> = match b.form {
        MmdForm::Consistent => vec![0.0; items.len()],
        MmdForm::Literal => items.iter().map(|tr| w(tr.sp_key)).collect(),
    };
    let scale = if b.normalize { raw_s.iter().sum::<f64>() / n } else { 1.0 };
    let per: Vec<Vec<Atom>> = items
        .iter()
        .enumerate()
        .map(|(j, tr)| atoms(tr, b.form, b.gamma, beta[j], raw_s[j] / scale, raw_sp[j] / scale))
        .collect();

    let mut measure = Measure::default();
    for a in per.iter().flatten() {
        measure.add(a.key, a.mass);
    }
    let (total, kd) = measure.energy(data, b.kernel);
    let coef = match b.estimator {
        MmdEstimator::VStatistic => 1.0 / (n * n),
        MmdEstimator::UStatistic => 1.0 / (n * (n - 1.0)),
    };
    let mut loss = coef * total;

    // d loss / d (normalized) w(s_j) and w(s'_j).
    let mut g_s = vec![0.0; items.len()];
    let mut g_sp = vec![0.0; items.len()];
    for (j, at) in per.iter().enumerate() {
        for a in at {
            g_s[j] += 2.0 * coef * a.d_ws * kd[&a.key];
            g_sp[j] += 2.0 * coef * a.d_wsp * kd[&a.key];
        }
        if b.estimator == MmdEstimator::UStatistic {
            for p in at {
                for q in at {
                    let k = b.kernel.eval(data.state(p.key), data.state(q.key));
                    loss -= coef * p.mass * q.mass * k;
                    g_s[j] -= 2.0 * coef * p.d_ws * q.mass * k;
                    g_sp[j] -= 2.0 * coef * p.d_wsp * q.mass * k;
                }
            }
        }
    }

    let through_scale = if b.normalize {
        let t: f64 = (0..items.len()).map(|j| (g_s[j] * raw_s[j] + g_sp[j] * raw_sp[j]) / scale).sum();
        t / (n * scale)
    } else {
        0.0
    };
    let mut dl_dw: HashMap<usize, f64> = HashMap::new();
    for (j, tr) in items.iter().enumerate() {
        *dl_dw.entry(tr.s_key).or_default() += g_s[j] / scale - through_scale;
        if b.form == MmdForm::Literal {
            *dl_dw.entry(tr.sp_key).or_default() += g_sp[j] / scale;
        }
    }
    let mut grads = vec![0.0; model.net.n_params()];
    let mut keys: Vec<_> = dl_dw.into_iter().collect();
    keys.sort_by_key(|&(k, _)| k);
    for (k, d) in keys {
        model.accumulate(data.state(k), d, &mut grads);
    }
    Ok(MmdOutput { loss, grads, clamped })
}

/// The ratio loss with exact expectations on a tabular task: `w` is a
/// per-state vector, states are one-hot, and sample averages are replaced by
/// occupancy-weighted sums.
pub fn population_mmd(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    mu: &TabularPolicy,
    w: &[f64],
    kernel: &Kernel,
    form: MmdForm,
) -> Result<f64> {
    let (ns, na, gamma) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    if w.len() != ns {
        return Err(Error::InvalidInput(format!("ratio has {} entries for {ns} states", w.len())));
    }
    let d_mu = exact_visitation(mdp, mu)?;
    let d_mu = d_mu.as_slice();
    let mut delta = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let m = mu.prob(s, a);
            if m == 0.0 {
                continue;
            }
            // mu * (pi / mu) = pi wherever mu has mass.
            let flow = d_mu[s] * pi.prob(s, a);
            let occ = d_mu[s] * m;
            for (sp, &p) in mdp.next_dist(s, a).iter().enumerate() {
                match form {
                    MmdForm::Consistent => delta[sp] -= gamma * flow * p * w[s],
                    MmdForm::Literal => delta[sp] += occ * p * w[sp],
                }
            }
            if form == MmdForm::Literal {
                delta[s] -= gamma * flow * w[s];
            }
        }
        match form {
            MmdForm::Consistent => delta[s] += d_mu[s] * w[s] - (1.0 - gamma) * mdp.initial()[s],
            MmdForm::Literal => delta[s] -= (1.0 - gamma) * d_mu[s],
        }
    }
    let pts: Vec<Vec<f64>> = (0..ns).map(|s| Space::Discrete(ns).encode(&[s as f64])).collect();
    let km = kernel_matrix(&pts, &pts, kernel);
    let dv = DVector::from_vec(delta);
    Ok(dv.dot(&(&km * &dv)))
}

/// Ratio model, optimizer and frozen kernel.
#[derive(Debug, Clone)]
pub struct RatioTrainer {
    pub model: RatioModel,
    pub optimizer: Adam,
    /// Fixed on the first step when the bandwidth comes from the median rule.
    pub kernel: Option<Kernel>,
    guard: DivergenceGuard,
    steps: usize,
}

impl RatioTrainer {
    pub fn new(model: RatioModel, cfg: &RunConfig) -> Result<Self> {
        let kernel = if cfg.bandwidth > 0.0 { Some(Kernel::new(cfg.kernel, cfg.bandwidth)?) } else { None };
        let optimizer = Adam::new(model.net.n_params(), cfg.ratio_lr);
        Ok(Self { model, optimizer, kernel, guard: DivergenceGuard::new("mmd_loss", cfg.divergence_factor), steps: 0 })
    }

    pub fn for_data(data: &TrainingData, cfg: &RunConfig, rng: &mut Rng) -> Result<Self> {
        let hidden = crate::estimators::hidden_for(cfg);
        Self::new(RatioModel::new(data.state_space, hidden, cfg.log_w_clip, rng), cfg)
    }

    pub fn kernel_for(&mut self, data: &TrainingData, batch: &[usize], family: KernelFamily) -> Result<Kernel> {
        if let Some(k) = self.kernel {
            return Ok(k);
        }
        let mut keys: Vec<usize> = batch.iter().flat_map(|&i| [data.items[i].s_key, data.items[i].sp_key]).collect();
        keys.sort_unstable();
        keys.dedup();
        let pts: Vec<&[f64]> = keys.iter().map(|&k| data.state(k)).collect();
        let k = Kernel::new(family, median_bandwidth(&pts))?;
        self.kernel = Some(k);
        Ok(k)
    }

    /// One Adam step on the ratio loss. Returns the pre-update loss.
    pub fn step(
        &mut self,
        pi: &dyn ActionDensity,
        mu: &dyn ActionDensity,
        data: &TrainingData,
        batch: &[usize],
        cfg: &RunConfig,
    ) -> Result<MmdOutput> {
        let kernel = self.kernel_for(data, batch, cfg.kernel)?;
        let b = MmdBatch { data, batch, gamma: cfg.gamma, kernel: &kernel, form: cfg.mmd_form, floor: cfg.importance_floor, normalize: cfg.ratio_normalize, estimator: cfg.mmd_estimator };
        let out = mmd_loss(&self.model, pi, mu, &b)?;
        self.steps += 1;
        self.guard.check(self.steps, out.loss)?;
        self.optimizer.step(self.model.net.params_mut(), &out.grads);
        if cfg.ratio_normalize {
            self.recenter(data, batch);
        }
        Ok(out)
    }

    /// The normalized loss ignores the overall scale of `w`; shift the output
    /// bias down whenever the batch reaches the upper clip so the scale cannot
    /// drift into saturation.
    fn recenter(&mut self, data: &TrainingData, batch: &[usize]) {
        let space = self.model.state_space;
        let top = batch
            .iter()
            .map(|&i| self.model.raw(&space.encode(data.state(data.items[i].s_key))))
            .fold(f64::NEG_INFINITY, f64::max);
        let excess = top - (self.model.clip - RECENTER_MARGIN);
        if excess > 0.0 {
            if let Some(bias) = self.model.net.params_mut().last_mut() {
                *bias -= excess;
            }
        }
    }
}

const RECENTER_MARGIN: f64 = 0.05;

/// `steps` ratio updates on fresh minibatches; returns the loss curve.
pub fn train_ratio(
    trainer: &mut RatioTrainer,
    pi: &dyn ActionDensity,
    mu: &dyn ActionDensity,
    data: &TrainingData,
    cfg: &RunConfig,
    steps: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch = data.sample_indices(cfg.batch_size, rng)?;
        curve.push(trainer.step(pi, mu, data, &batch, cfg)?.loss);
    }
    Ok(curve)
}

/// Learned ratio at each state of a discrete state space.
pub fn ratio_table(model: &RatioModel) -> Option<Vec<f64>> {
    let Space::Discrete(n) = model.state_space else { return None };
    Some((0..n).map(|s| model.w(&model.state_space.encode(&[s as f64]))).collect())
}
