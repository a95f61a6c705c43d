//! `sbac`: dataset generation, training runs, evaluation and reports.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use sbac_core::estimators::hidden_for;
use sbac_core::harness::{
    self, emit_plot, latest_checkpoint, median, normalized_score, read_checkpoints, read_eval_log, read_metrics,
    stability_metrics, Checkpoint, RunDir, StabilityReport,
};
use sbac_core::mdp::registry::{dataset_for, make_env, tabular_behavior};
use sbac_core::mdp::BehaviorTier;
use sbac_core::oracle;
use sbac_core::ratio::RatioModel;
use sbac_core::sbac::{eval_seed, evaluate};
use sbac_core::{train_sbac, AblationMode, PolicyNet, RunConfig, Rng, TabularPolicy, TrainingData};
use serde::Serialize;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sbac", version, about = "Offline actor-critic with state-dependent behavior regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out a behavior policy and write the transitions as JSON lines.
    GenData(GenData),
    /// Run both training phases and fill a run directory.
    Train(Train),
    /// Re-evaluate a policy checkpoint from a run directory.
    Evaluate(Evaluate),
    /// Exact tabular quantities as JSON.
    Oracle(Oracle),
    /// Dump the learned ratio over the dataset's states as CSV.
    Ratio(RatioDump),
    /// Normalized score of a raw return.
    Score(Score),
    /// Worst-episode and worst-evaluation percent differences.
    Stability(Stability),
    /// SVG learning curve of one metric over one or more runs.
    Plot(Plot),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    env: Option<String>,
    /// Behavior policy: random, medium, expert, mixed (or reluctant on detour).
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip reward rescaling.
    #[arg(long)]
    raw_rewards: bool,
    #[arg(long, default_value = "dataset.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    mode: Option<AblationMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; created if missing.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Policy checkpoint step; the latest one by default.
    #[arg(long)]
    step: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleOp {
    Visitation,
    QMu,
    Return,
    PerformanceDifference,
    ImportanceSampled,
    Ratio,
    BackwardFlow,
    Bound,
}

#[derive(Args)]
struct Oracle {
    #[arg(long, default_value = "gridworld")]
    env: String,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, value_enum)]
    op: OracleOp,
    /// Target policy tier.
    #[arg(long, default_value = "expert")]
    pi: String,
    /// Behavior policy tier.
    #[arg(long, default_value = "random")]
    mu: String,
}

#[derive(Args)]
struct RatioDump {
    #[arg(long)]
    run: PathBuf,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Score {
    #[arg(long)]
    raw: f64,
    /// Random-policy reference; taken from the oracle when `--env` is given.
    #[arg(long)]
    random: Option<f64>,
    #[arg(long)]
    expert: Option<f64>,
    #[arg(long)]
    env: Option<String>,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
}

#[derive(Args)]
struct Stability {
    /// Run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
}

#[derive(Args)]
struct Plot {
    /// Run directories or metrics CSV files; several give a mean +- std band.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "eval_return_mean")]
    field: String,
    #[arg(long, default_value = "plot.svg")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<sbac_core::Error>().map_or(1, sbac_core::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_run(a),
        Command::Oracle(a) => oracle_report(a),
        Command::Ratio(a) => ratio_dump(a),
        Command::Score(a) => score(a),
        Command::Stability(a) => stability(a),
        Command::Plot(a) => plot(a),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(env) = a.env {
        cfg.env = env;
    }
    if let Some(policy) = a.policy {
        cfg.data_policy = policy;
    }
    if let Some(n) = a.episodes {
        cfg.data_episodes = n;
    }
    if let Some(seed) = a.seed {
        cfg.data_seed = seed;
    }
    cfg.dataset.clear();
    cfg.rescale_rewards = !a.raw_rewards;
    cfg.validate()?;
    let (_, ds) = dataset_for(&cfg)?;
    ds.save(&a.out)?;
    eprintln!("wrote {} transitions to {}", ds.len(), a.out.display());
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(mode) = a.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (env, ds) = dataset_for(&cfg)?;
    let data = TrainingData::new(&ds, env.state_space(), env.action_space())?;
    let mut dir = RunDir::create(&a.out, &cfg)?;
    let out = train_sbac(Some(env.as_ref()), &data, &cfg, &mut dir)?;
    dir.write_report(&out.report)?;
    eprintln!(
        "{} run finished: final mean return {}",
        cfg.mode,
        out.report.final_eval_mean.map_or("n/a".to_string(), |m| format!("{m:.3}"))
    );
    Ok(())
}

fn run_config(run: &Path) -> Result<RunConfig> {
    let path = run.join(harness::CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(sbac_core::Error::Io).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_toml(&text)?)
}

fn checkpoint(run: &Path, name: &str, step: Option<usize>) -> Result<Checkpoint> {
    let path = run.join(harness::CHECKPOINT_FILE);
    let all = read_checkpoints(&path).with_context(|| format!("reading {}", path.display()))?;
    let found = match step {
        Some(step) => all.iter().find(|c| c.name == name && c.step == step),
        None => latest_checkpoint(&all, name),
    };
    match found {
        Some(c) => Ok(c.clone()),
        None => Err(sbac_core::Error::Data(format!("no {name} checkpoint in {}", path.display())).into()),
    }
}

#[derive(Serialize)]
struct EvaluationOutput {
    step: usize,
    seed: u64,
    returns: Vec<f64>,
    mean: f64,
    min: f64,
}

fn evaluate_run(a: Evaluate) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let ckpt = checkpoint(&a.run, "policy", a.step)?;
    let env = make_env(&cfg.env, cfg.gamma)?;
    let mut policy = PolicyNet::for_spaces(env.state_space(), env.action_space(), hidden_for(&cfg), &mut Rng::seed_from_u64(0));
    if policy.net().sizes() != ckpt.sizes.as_slice() {
        bail!(sbac_core::Error::Data("policy checkpoint does not match the run config".into()));
    }
    policy.net_mut().set_params(&ckpt.params);
    let seed = eval_seed(cfg.seed, ckpt.step);
    let returns = evaluate(env.as_ref(), &policy, a.episodes.unwrap_or(cfg.eval_episodes), cfg.eval_horizon, seed);
    let record = sbac_core::EvalRecord { step: ckpt.step, seed, returns };
    print_json(&EvaluationOutput { step: record.step, seed, mean: record.mean(), min: record.min(), returns: record.returns })
}

fn tier_policy(env: &dyn sbac_core::Environment, name: &str) -> Result<TabularPolicy> {
    if name != sbac_core::mdp::registry::RELUCTANT {
        name.parse::<BehaviorTier>()?;
    }
    tabular_behavior(env, name)?
        .ok_or_else(|| sbac_core::Error::Config(format!("environment {} has no exact oracle", env.id())).into())
}

fn oracle_report(a: Oracle) -> Result<()> {
    let env = make_env(&a.env, a.gamma)?;
    let mdp = env.as_tabular().ok_or_else(|| sbac_core::Error::Config(format!("{} is not tabular", a.env)))?;
    let pi = tier_policy(env.as_ref(), &a.pi)?;
    let mu = tier_policy(env.as_ref(), &a.mu)?;
    let value = match a.op {
        OracleOp::Visitation => serde_json::to_value(oracle::exact_visitation(mdp, &pi)?)?,
        OracleOp::QMu => serde_json::to_value(oracle::exact_q_mu(mdp, &mu)?)?,
        OracleOp::Return => serde_json::json!({
            "pi": oracle::exact_return(mdp, &pi)?,
            "mu": oracle::exact_return(mdp, &mu)?,
        }),
        OracleOp::PerformanceDifference => serde_json::to_value(oracle::performance_difference_check(mdp, &pi, &mu)?)?,
        OracleOp::ImportanceSampled => {
            serde_json::json!({ "value": oracle::importance_sampled_difference(mdp, &pi, &mu)? })
        }
        OracleOp::Ratio => serde_json::json!({ "w": oracle::exact_ratio(mdp, &pi, &mu)? }),
        OracleOp::BackwardFlow => {
            let w = oracle::exact_ratio(mdp, &pi, &mu)?;
            let tw = oracle::apply_backward_flow_exact(mdp, &pi, &mu, &w)?;
            let residual = w.iter().zip(&tw).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            serde_json::json!({ "w": w, "tw": tw, "max_residual": residual })
        }
        OracleOp::Bound => serde_json::to_value(oracle::surrogate_bound(mdp, &pi, &mu)?)?,
    };
    print_json(&value)
}

fn ratio_dump(a: RatioDump) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let ckpt = checkpoint(&a.run, "ratio", None)?;
    let (env, ds) = dataset_for(&cfg)?;
    let data = TrainingData::new(&ds, env.state_space(), env.action_space())?;
    let mut model = RatioModel::new(data.state_space, hidden_for(&cfg), cfg.log_w_clip, &mut Rng::seed_from_u64(0));
    if model.net.sizes() != ckpt.sizes.as_slice() {
        bail!(sbac_core::Error::Data("ratio checkpoint does not match the run config".into()));
    }
    model.net.set_params(&ckpt.params);

    let mut seen = std::collections::BTreeSet::new();
    let mut raw_states = Vec::new();
    for tr in ds.transitions() {
        let key: Vec<u64> = tr.s.iter().map(|x| x.to_bits()).collect();
        if seen.insert(key) {
            raw_states.push(tr.s.clone());
        }
    }
    let dim = raw_states.first().map_or(0, Vec::len);
    let mut text = String::new();
    let header: Vec<String> = if data.state_space.is_discrete() {
        vec!["state_id".into()]
    } else {
        (0..dim).map(|i| format!("x{i}")).collect()
    };
    writeln!(text, "{},w", header.join(","))?;
    for s in &raw_states {
        let coords: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        writeln!(text, "{},{}", coords.join(","), model.w(&data.state_space.encode(s)))?;
    }
    match a.out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn score(a: Score) -> Result<()> {
    let (random, expert) = match (a.random, a.expert, &a.env) {
        (Some(r), Some(e), _) => (r, e),
        (_, _, Some(env_id)) => {
            let env = make_env(env_id, a.gamma)?;
            let mdp = env.as_tabular().ok_or_else(|| sbac_core::Error::Config(format!("{env_id} has no oracle references")))?;
            let r = oracle::exact_return(mdp, &tier_policy(env.as_ref(), "random")?)?;
            let e = oracle::exact_return(mdp, &tier_policy(env.as_ref(), "expert")?)?;
            (a.random.unwrap_or(r), a.expert.unwrap_or(e))
        }
        _ => bail!(sbac_core::Error::Config("give --random and --expert, or --env".into())),
    };
    println!("{}", normalized_score(a.raw, random, expert)?);
    Ok(())
}

#[derive(Serialize)]
struct StabilitySummary {
    runs: Vec<(String, StabilityReport)>,
    median_worst_episode_pct: f64,
    median_worst_evaluation_pct: f64,
}

fn stability(a: Stability) -> Result<()> {
    let mut runs = Vec::new();
    for dir in &a.runs {
        let path = dir.join(harness::EVAL_FILE);
        let log = read_eval_log(&path).with_context(|| format!("reading {}", path.display()))?;
        runs.push((dir.display().to_string(), stability_metrics(&log)?));
    }
    let episode: Vec<f64> = runs.iter().map(|(_, r)| r.worst_episode_pct).collect();
    let evaluation: Vec<f64> = runs.iter().map(|(_, r)| r.worst_evaluation_pct).collect();
    print_json(&StabilitySummary {
        median_worst_episode_pct: median(&episode),
        median_worst_evaluation_pct: median(&evaluation),
        runs,
    })
}

fn plot(a: Plot) -> Result<()> {
    let mut runs = Vec::new();
    for input in &a.inputs {
        let path = if input.is_dir() { input.join(harness::METRICS_FILE) } else { input.clone() };
        runs.push(read_metrics(&path).with_context(|| format!("reading {}", path.display()))?);
    }
    let svg = emit_plot(&runs, &a.field)?;
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
