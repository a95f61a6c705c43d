use rand::SeedableRng;
use sbac_core::approx::Adam;
use sbac_core::config::{MmdEstimator, MmdForm, RunConfig};
use sbac_core::data::TrainingData;
use sbac_core::estimators::{train_phase_one, Critic};
use sbac_core::harness::NullObserver;
use sbac_core::mdp::registry::{dataset_for, make_env, tabular_behavior};
use sbac_core::mdp::{index_of, rollout, Environment, PolicyNet, Space, TabularEnv, TabularMdp, TabularPolicy};
use sbac_core::oracle::{exact_q_mu, exact_ratio, exact_return};
use sbac_core::ratio::{kernel_matrix, mmd_loss, normalize_mean, ratio_table, train_ratio, Kernel, MmdBatch, RatioModel, RatioTrainer};
use sbac_core::sbac::policy_loss;
use sbac_core::Rng;

fn gridworld_medium() -> (Box<dyn Environment>, TrainingData) {
    let cfg = RunConfig::default();
    let (env, ds) = dataset_for(&cfg).unwrap();
    let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
    (env, data)
}

#[test]
fn phase_one_recovers_behavior_and_its_values() {
    let (env, data) = gridworld_medium();
    let mdp = env.as_tabular().unwrap();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let cfg = RunConfig {
        tabular: true,
        m_steps: 20_000,
        critic_lr: 0.1,
        tau: 0.1,
        behavior_lr: 0.001,
        ..Default::default()
    };
    let out = train_phase_one(&data, &cfg, &mut Rng::seed_from_u64(0), &mut NullObserver).unwrap();

    let mut counts = vec![0.0; ns * na];
    for tr in &data.items {
        counts[index_of(&tr.s) * na + index_of(&tr.a)] += 1.0;
    }
    let learned = out.behavior.policy.to_tabular().unwrap();
    for s in 0..ns {
        let n: f64 = counts[s * na..(s + 1) * na].iter().sum();
        if n == 0.0 {
            continue;
        }
        for a in 0..na {
            let mle = counts[s * na + a] / n;
            assert!((learned.prob(s, a) - mle).abs() < 0.03, "state {s} action {a}: {} vs {mle}", learned.prob(s, a));
        }
    }

    let mu = tabular_behavior(env.as_ref(), "medium").unwrap().unwrap();
    let oracle = exact_q_mu(mdp, &mu).unwrap();
    let ceiling = 1.0 / (1.0 - cfg.gamma);
    let mut worst: f64 = 0.0;
    for s in 0..ns {
        for a in 0..na {
            if counts[s * na + a] > 0.0 {
                worst = worst.max((out.q.critic.value(&[s as f64], &[a as f64]) - oracle.q(s, a)).abs());
            }
        }
    }
    assert!(worst < 0.05 * ceiling, "max error {worst}");

    let v0: f64 = (0..na).map(|a| learned.prob(0, a) * out.q.critic.value(&[0.0], &[a as f64])).sum();
    let j = exact_return(mdp, &mu).unwrap();
    assert!((v0 - j).abs() < 0.05 * j, "V(rho) {v0} vs {j}");
}

#[test]
fn oracle_instrumented_policy_ascent_improves_on_behavior() {
    let (env, data) = gridworld_medium();
    let mdp = env.as_tabular().unwrap();
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mu = tabular_behavior(env.as_ref(), "medium").unwrap().unwrap();
    let critic = Critic::from_table(ns, na, &exact_q_mu(mdp, &mu).unwrap().q).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let mut pi = PolicyNet::for_spaces(Space::Discrete(ns), Space::Discrete(na), &[], &mut rng);
    let mut opt = Adam::new(pi.net().n_params(), 0.01);
    let mut w = vec![1.0; ns];
    for step in 0..5000 {
        if step % 100 == 0 {
            w = exact_ratio(mdp, &pi.to_tabular().unwrap(), &mu).unwrap();
        }
        let idx = data.sample_indices(64, &mut rng).unwrap();
        let states: Vec<&[f64]> = idx.iter().map(|&i| data.items[i].s.as_slice()).collect();
        let weights = normalize_mean(&states.iter().map(|s| w[index_of(s)]).collect::<Vec<_>>());
        let lg = policy_loss(&pi, &critic, &mu, &states, &weights, 0.5, &mut rng).unwrap();
        opt.step(pi.net_mut().params_mut(), &lg.grads);
    }
    let j_pi = exact_return(mdp, &pi.to_tabular().unwrap()).unwrap();
    let j_mu = exact_return(mdp, &mu).unwrap();
    assert!(j_pi >= j_mu, "{j_pi} < {j_mu}");
}

/// Three states in a row; action 0 returns to the start, action 1 advances.
fn ladder() -> TabularMdp {
    let n = 3;
    let mut p = vec![0.0; n * 2 * n];
    for s in 0..n {
        p[(s * 2) * n] = 1.0;
        p[(s * 2 + 1) * n + (s + 1).min(n - 1)] = 1.0;
    }
    TabularMdp::new(n, 2, p, vec![0.0; n * 2], vec![1.0, 0.0, 0.0], 0.9).unwrap()
}

#[test]
fn ratio_saturates_at_the_clip_for_rarely_visited_states() {
    let mdp = ladder();
    let mu = TabularPolicy::from_rows(&vec![vec![0.7, 0.3]; 3]).unwrap();
    let pi = TabularPolicy::from_rows(&vec![vec![0.0, 1.0]; 3]).unwrap();
    assert!(exact_ratio(&mdp, &pi, &mu).unwrap()[2] > 2f64.exp());
    let env = TabularEnv::discounted("ladder", mdp, 1000);
    let ds = rollout(&env, &mu, "mu", 500, 0).unwrap();
    let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
    let cfg = RunConfig { tabular: true, gamma: 0.9, ratio_lr: 0.01, ..Default::default() };
    let mut rng = Rng::seed_from_u64(0);
    let mut trainer = RatioTrainer::for_data(&data, &cfg, &mut rng).unwrap();
    train_ratio(&mut trainer, &pi, &mu, &data, &cfg, 5000, &mut rng).unwrap();
    let w = ratio_table(&trainer.model).unwrap();
    assert!(w[2].ln() > 1.9, "log w = {}", w[2].ln());
    assert!(w.iter().all(|&x| (-2.0 - 1e-12..=2.0 + 1e-12).contains(&x.ln())));
}

#[test]
fn oracle_ratio_beats_scaled_ratios_on_average() {
    let env = make_env("gridworld", 0.99).unwrap();
    let mdp = env.as_tabular().unwrap();
    let pi = tabular_behavior(env.as_ref(), "expert").unwrap().unwrap();
    let mu = tabular_behavior(env.as_ref(), "random").unwrap().unwrap();
    let ds = sbac_core::mdp::registry::generate(env.as_ref(), "random", 200, 0).unwrap();
    let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
    let w = exact_ratio(mdp, &pi, &mu).unwrap();
    let kernel = Kernel::new(sbac_core::config::KernelFamily::Gaussian, 2f64.sqrt()).unwrap();
    let mut rng = Rng::seed_from_u64(5);
    let batches: Vec<Vec<usize>> = (0..200).map(|_| data.sample_indices(4096, &mut rng).unwrap()).collect();
    let mean_loss = |log_scale: &[f64]| {
        let scaled: Vec<f64> = w.iter().zip(log_scale).map(|(x, e)| x * e.exp()).collect();
        let model = RatioModel::from_table(&scaled, 10.0).unwrap();
        batches
            .iter()
            .map(|batch| {
                let b = MmdBatch {
                    data: &data,
                    batch,
                    gamma: 0.99,
                    kernel: &kernel,
                    form: MmdForm::Consistent,
                    floor: 1e-4,
                    normalize: true,
                    estimator: MmdEstimator::UStatistic,
                };
                mmd_loss(&model, &pi, &mu, &b).unwrap().loss
            })
            .sum::<f64>()
            / batches.len() as f64
    };
    let at_oracle = mean_loss(&[0.0; 25]);
    // A uniform rescaling is invisible to the normalized loss.
    assert!((mean_loss(&[0.2; 25]) - at_oracle).abs() < 1e-12);
    for pattern in 0..5 {
        for eps in [-0.2, 0.2] {
            let signs: Vec<f64> = (0..25).map(|s| if (s * 7 + pattern * 3) % 5 < 2 { eps } else { -eps }).collect();
            let perturbed = mean_loss(&signs);
            assert!(at_oracle < perturbed, "pattern {pattern} eps {eps}: {at_oracle} >= {perturbed}");
        }
    }
}

#[test]
fn v_statistic_is_non_negative_and_kernels_are_psd() {
    let (_, data) = gridworld_medium();
    let mut rng = Rng::seed_from_u64(2);
    let model = RatioModel::new(data.state_space, &[8], 2.0, &mut rng);
    let pi = TabularPolicy::uniform(25, 4);
    let mu = tabular_behavior(make_env("gridworld", 0.99).unwrap().as_ref(), "medium").unwrap().unwrap();
    let kernel = Kernel::new(sbac_core::config::KernelFamily::Laplacian, 1.0).unwrap();
    for _ in 0..20 {
        let batch = data.sample_indices(32, &mut rng).unwrap();
        let b = MmdBatch {
            data: &data,
            batch: &batch,
            gamma: 0.99,
            kernel: &kernel,
            form: MmdForm::Consistent,
            floor: 1e-4,
            normalize: true,
            estimator: MmdEstimator::VStatistic,
        };
        assert!(mmd_loss(&model, &pi, &mu, &b).unwrap().loss >= -1e-12);
    }
    let pts: Vec<Vec<f64>> = (0..30).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    let k = kernel_matrix(&pts, &pts, &kernel);
    assert!(k.symmetric_eigenvalues().min() > -1e-10);
}
