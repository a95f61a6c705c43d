use super::{BehaviorTier, Environment, Policy, Space, Step, TANH_CLAMP};
use crate::Rng;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Planar point mass with bounded velocity commands.
///
/// `s' = clamp(s + dt * a + drift + noise, -1, 1)` and the reward is the
/// negative distance of `s'` to the goal.
#[derive(Debug, Clone)]
pub struct PointMass {
    pub horizon: usize,
    pub dt: f64,
    pub drift: [f64; 2],
    pub noise_std: f64,
    pub goal: [f64; 2],
    /// Start box `[lo, hi]^2`; a degenerate box gives a fixed start.
    pub start: (f64, f64),
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            horizon: 100,
            dt: 0.1,
            drift: [0.0, 0.0],
            noise_std: 0.01,
            goal: [0.6, 0.6],
            start: (-0.9, -0.5),
        }
    }
}

impl Environment for PointMass {
    fn id(&self) -> &str {
        "pointmass"
    }

    fn state_space(&self) -> Space {
        Space::Box(2)
    }

    fn action_space(&self) -> Space {
        Space::Box(2)
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let (lo, hi) = self.start;
        (0..2).map(|_| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect()
    }

    fn step(&self, state: &[f64], action: &[f64], rng: &mut Rng) -> Step {
        let next: Vec<f64> = (0..2)
            .map(|i| {
                let a = action[i].clamp(-1.0, 1.0);
                let noise = if self.noise_std > 0.0 {
                    self.noise_std * normal(rng)
                } else {
                    0.0
                };
                (state[i] + self.dt * a + self.drift[i] + noise).clamp(-1.0, 1.0)
            })
            .collect();
        let dist = ((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        Step { next_state: next, reward: -dist, done: false }
    }
}

/// One mixture component of a [`ScriptedController`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerComponent {
    pub weight: f64,
    /// Probability of a uniformly random action.
    pub eps: f64,
    /// Std of the pre-squash noise around the proportional command.
    pub noise: f64,
}

/// Noisy proportional controller toward a goal; the continuous analogue of
/// epsilon-greedy behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedController {
    pub goal: [f64; 2],
    pub gain: f64,
    pub components: Vec<ControllerComponent>,
}

impl ScriptedController {
    pub fn for_tier(goal: [f64; 2], tier: BehaviorTier) -> Self {
        let medium = ControllerComponent { weight: 1.0, eps: BehaviorTier::MEDIUM_EPS, noise: 0.4 };
        let expert = ControllerComponent { weight: 1.0, eps: BehaviorTier::EXPERT_EPS, noise: 0.1 };
        let components = match tier {
            BehaviorTier::Random => vec![ControllerComponent { weight: 1.0, eps: 1.0, noise: 1.0 }],
            BehaviorTier::Medium => vec![medium],
            BehaviorTier::Expert => vec![expert],
            BehaviorTier::Mixed => vec![
                ControllerComponent { weight: 0.5, ..medium },
                ControllerComponent { weight: 0.5, ..expert },
            ],
        };
        Self { goal, gain: 3.0, components }
    }

    fn command(&self, state: &[f64]) -> [f64; 2] {
        let c = |i: usize| (self.gain * (self.goal[i] - state[i])).clamp(-0.95, 0.95).atanh();
        [c(0), c(1)]
    }
}

impl Policy for ScriptedController {
    fn action_space(&self) -> Space {
        Space::Box(2)
    }

    fn sample(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let comp = self
            .components
            .iter()
            .find(|c| {
                acc += c.weight;
                u < acc
            })
            .unwrap_or_else(|| self.components.last().unwrap());
        if rng.random::<f64>() < comp.eps {
            return (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let center = self.command(state);
        center
            .iter()
            .map(|c| (c + comp.noise * normal(rng)).tanh())
            .collect()
    }

    fn log_prob(&self, state: &[f64], action: &[f64]) -> f64 {
        let center = self.command(state);
        let density: f64 = self
            .components
            .iter()
            .map(|comp| {
                let squashed: f64 = (0..2)
                    .map(|i| {
                        let a = action[i].clamp(-TANH_CLAMP, TANH_CLAMP);
                        let z = (a.atanh() - center[i]) / comp.noise;
                        (-0.5 * z * z).exp()
                            / (comp.noise * (2.0 * std::f64::consts::PI).sqrt() * (1.0 - a * a))
                    })
                    .product();
                comp.weight * (comp.eps * 0.25 + (1.0 - comp.eps) * squashed)
            })
            .sum();
        density.ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dynamics_stay_in_box() {
        let env = PointMass { noise_std: 0.5, ..Default::default() };
        let mut rng = Rng::seed_from_u64(0);
        let mut s = env.reset(&mut rng);
        for _ in 0..500 {
            let a: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            s = env.step(&s, &a, &mut rng).next_state;
            assert!(s.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn controller_heads_to_goal() {
        let pol = ScriptedController::for_tier([0.6, 0.6], BehaviorTier::Expert);
        let mut rng = Rng::seed_from_u64(2);
        let a = pol.sample(&[-0.5, -0.5], &mut rng);
        assert!(a[0] > 0.0 && a[1] > 0.0);
        assert!(pol.log_prob(&[-0.5, -0.5], &a).is_finite());
    }
}
