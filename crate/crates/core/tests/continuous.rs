use sbac_core::harness::Recorder;
use sbac_core::mdp::registry::dataset_for;
use sbac_core::{train_sbac, AblationMode, RunConfig, TrainingData};

fn point_mass_cfg(mode: AblationMode) -> RunConfig {
    RunConfig {
        env: "pointmass".into(),
        data_episodes: 20,
        mode,
        hidden: vec![16, 16],
        batch_size: 32,
        m_steps: 100,
        n_steps: 100,
        eval_interval: 50,
        log_interval: 25,
        eval_episodes: 3,
        eval_horizon: 50,
        ..Default::default()
    }
}

#[test]
fn point_mass_runs_every_mode_end_to_end() {
    for mode in [AblationMode::Full, AblationMode::Ablation1, AblationMode::Ablation2] {
        let cfg = point_mass_cfg(mode);
        let (env, ds) = dataset_for(&cfg).unwrap();
        let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
        let mut rec = Recorder::default();
        let out = train_sbac(Some(env.as_ref()), &data, &cfg, &mut rec).unwrap();
        assert_eq!(out.evaluations.len(), 2);
        assert!(out.evaluations.iter().all(|e| e.returns.iter().all(|r| r.is_finite())));
        assert!(out.report.oracle_return.is_none());
        assert_eq!(rec.rows.last().unwrap().step, cfg.m_steps + cfg.n_steps);
        assert!(rec.rows.iter().filter_map(|r| r.policy_loss).all(f64::is_finite));
    }
}

#[test]
fn tabular_mode_rejects_continuous_tasks() {
    let cfg = RunConfig { tabular: true, ..point_mass_cfg(AblationMode::Full) };
    let (env, ds) = dataset_for(&cfg).unwrap();
    let data = TrainingData::new(&ds, env.state_space(), env.action_space()).unwrap();
    let err = train_sbac(Some(env.as_ref()), &data, &cfg, &mut Recorder::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
