use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vop_core::config::PipelineConfig;
use vop_core::dataset::{generate_batch, TransitionBatch};
use vop_core::ensemble::{self, EnsembleModel};
use vop_core::evaluator::{self, Specialist};
use vop_core::trainer::{self, LearningCurve, PolicyManifest};
use vop_core::{Objective, PolicyModel};

/// Variable objective policy pipeline: offline cart-pole data, dynamics
/// ensemble, objective-conditioned policy, evaluation and live steering.
#[derive(Debug, Parser)]
#[command(name = "vop", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Options,
}

#[derive(Debug, Args)]
struct Options {
    /// Pipeline config file (JSON); missing keys take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run directory holding every artifact
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    out: PathBuf,
    /// Worker thread cap [default: all cores]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed of the stage being run: dataset, ensemble, or policy to train/evaluate [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Random-policy episodes to generate [default: 1000]
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Steps per generated episode [default: 250]
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Ensemble size [default: 8]
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Virtual rollout horizon [default: 65]
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Discount factor [default: 1.0]
    #[arg(long, global = true)]
    gamma: Option<f64>,
    /// Maximum policy training epochs [default: 200]
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Target position; with --omega-theta trains a fixed-objective specialist [default: none]
    #[arg(long, global = true, allow_negative_numbers = true)]
    omega_x: Option<f64>,
    /// Pole alignment weight; selects the scenario run or a specialist objective [default: none]
    #[arg(long, global = true)]
    omega_theta: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the random-policy transition batch
    GenData,
    /// Train the dynamics ensemble on the batch
    TrainModels,
    /// Train policies on the frozen ensemble
    TrainPolicy,
    /// Evaluate trained policies on the objective grid
    Evaluate,
    /// Run the target switch scenario on the true environment
    Scenario,
    /// Serve the steering interface for a trained policy
    Serve {
        /// Listen port
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulation ticks per second
        #[arg(long, default_value_t = vop_steer::DEFAULT_TICK_HZ)]
        tick_hz: f64,
    },
}

/// An upstream artifact that does not exist yet.
#[derive(Debug)]
struct Missing(PathBuf);

impl std::fmt::Display for Missing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing artifact {}", self.0.display())
    }
}

impl std::error::Error for Missing {}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Missing(path).into())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageRecord {
    config_hash: String,
    outputs: Vec<String>,
}

struct Run {
    cfg: PipelineConfig,
    out: PathBuf,
    seed: Option<u64>,
    fixed: Option<Objective>,
    omega_theta: Option<f64>,
}

impl Run {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn record(&self, stage: &str, outputs: Vec<PathBuf>) -> Result<()> {
        let path = self.path("manifest.json");
        let mut manifest: RunManifest = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))?,
            Err(_) => RunManifest::default(),
        };
        manifest.tool = "vop".into();
        manifest.version = env!("CARGO_PKG_VERSION").into();
        let mut outputs: Vec<String> = outputs
            .iter()
            .map(|p| p.strip_prefix(&self.out).unwrap_or(p).display().to_string())
            .collect();
        outputs.sort();
        manifest.stages.insert(
            stage.into(),
            StageRecord {
                config_hash: self.cfg.hash(),
                outputs,
            },
        );
        write(&path, &serde_json::to_string_pretty(&manifest)?)?;
        write(&self.path(&format!("config.{stage}.json")), &self.cfg.to_json()?)
    }

    fn load_batch(&self) -> Result<TransitionBatch> {
        let path = require(self.path(&self.cfg.paths.dataset))?;
        Ok(TransitionBatch::load(&path)?)
    }

    fn load_models(&self) -> Result<EnsembleModel> {
        let dir = self.path(&self.cfg.paths.models);
        require(dir.join("manifest.json"))?;
        Ok(EnsembleModel::load(&dir)?.0)
    }

    fn policy_dir(&self, seed: u64) -> PathBuf {
        self.path(&self.cfg.paths.policies).join(format!("seed_{seed}"))
    }

    fn specialist_dir(&self, o: &Objective, seed: u64) -> PathBuf {
        self.path(&self.cfg.paths.policies)
            .join(format!("specialist_{}_{}_seed_{seed}", o.omega_x, o.omega_theta))
    }

    fn load_policy(&self, dir: &Path) -> Result<(PolicyModel, PolicyManifest)> {
        require(dir.join("manifest.json"))?;
        Ok(PolicyModel::load(dir)?)
    }

    fn report_dir(&self) -> Result<PathBuf> {
        let dir = self.path(&self.cfg.paths.report);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn build_config(opts: &Options, command: &Command) -> Result<PipelineConfig> {
    let mut cfg = match &opts.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = opts.episodes {
        cfg.dataset.episodes = v;
    }
    if let Some(v) = opts.steps {
        cfg.dataset.steps = v;
    }
    if let Some(v) = opts.k {
        cfg.ensemble.k = v;
    }
    if let Some(v) = opts.horizon {
        cfg.train.horizon = v;
    }
    if let Some(v) = opts.gamma {
        cfg.train.gamma = v;
    }
    if let Some(v) = opts.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(s) = opts.seed {
        match command {
            Command::GenData => cfg.dataset.seed = s,
            Command::TrainModels => cfg.ensemble.seed = s,
            _ => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(run: &Run) -> Result<()> {
    let d = &run.cfg.dataset;
    let batch = generate_batch(d.episodes, d.steps, d.seed, &run.cfg.physics)?;
    let path = run.path(&run.cfg.paths.dataset);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    batch.save(&path)?;
    println!("wrote {} transitions to {}", batch.len(), path.display());
    run.record("gen-data", vec![path])
}

fn train_models(run: &Run) -> Result<()> {
    let batch = run.load_batch()?;
    let (model, manifest) = ensemble::train_ensemble(&batch, &run.cfg.ensemble)?;
    let dir = run.path(&run.cfg.paths.models);
    model.save(&dir, &manifest)?;
    let longest = batch.episodes().iter().map(|e| e.len()).max().unwrap_or(0);
    let (horizons, skipped): (Vec<usize>, Vec<usize>) = ensemble::REPORT_HORIZONS.iter().partition(|&&h| h <= longest);
    if !skipped.is_empty() {
        eprintln!("drift horizons {skipped:?} exceed the {longest}-step episodes; not reported");
    }
    let report = ensemble::model_report(&model, &batch, &manifest.holdout_episodes, &horizons, &model.norm().sigma_s)?;
    let report_path = dir.join("report.json");
    write(&report_path, &serde_json::to_string_pretty(&report)?)?;
    let r = report.one_step_rmse;
    println!("one-step holdout rmse x {:.5} theta {:.5} x_dot {:.5} theta_dot {:.5}", r[0], r[1], r[2], r[3]);
    for p in &report.drift {
        println!("open-loop drift h={} normalized rmse {:.5}", p.horizon, p.normalized_rmse);
    }
    let mut outputs: Vec<PathBuf> = (0..model.k()).map(|k| dir.join(format!("member_{k}.json"))).collect();
    outputs.extend([dir.join("norm_stats.json"), dir.join("manifest.json"), report_path]);
    run.record("train-models", outputs)
}

fn save_policy(dir: &Path, policy: &PolicyModel, curve: &LearningCurve, cfg: &trainer::TrainConfig, model: &EnsembleModel) -> Result<Vec<PathBuf>> {
    policy.save(dir, &policy.manifest(cfg, model.norm(), curve.epochs.len()))?;
    write(&dir.join("learning_curve.csv"), &curve.to_csv())?;
    write(&dir.join("learning_curve.json"), &serde_json::to_string_pretty(curve)?)?;
    Ok(["policy.json", "manifest.json", "learning_curve.csv", "learning_curve.json"]
        .iter()
        .map(|f| dir.join(f))
        .collect())
}

fn train_policy(run: &Run) -> Result<()> {
    let batch = run.load_batch()?;
    let model = run.load_models()?;
    let seeds = match run.seed {
        Some(s) => vec![s],
        None => run.cfg.policy_seeds(),
    };
    let mut outputs = Vec::new();
    for seed in seeds {
        let cfg = trainer::TrainConfig {
            seed,
            fixed_objective: run.fixed,
            ..run.cfg.train.clone()
        };
        let (policy, curve) = trainer::train_policy_with(&model, &batch, &cfg, |s, _| {
            eprintln!("seed {seed} epoch {} virtual return {:.3} +- {:.3}", s.epoch, s.mean_virtual_return, s.std_virtual_return);
        })?;
        let dir = match &run.fixed {
            Some(o) => run.specialist_dir(o, seed),
            None => run.policy_dir(seed),
        };
        outputs.extend(save_policy(&dir, &policy, &curve, &cfg, &model)?);
        let last = curve.epochs.last().map_or(f64::NAN, |e| e.mean_virtual_return);
        println!("seed {seed}: {} epochs ({:?}), final virtual return {last:.3}", curve.epochs.len(), curve.stop);
    }
    run.record(if run.fixed.is_some() { "train-specialist" } else { "train-policy" }, outputs)
}

/// Seeds with a saved policy directory, ascending.
fn saved_seeds(run: &Run, prefix: &str) -> Vec<(u64, PathBuf)> {
    let mut found: Vec<(u64, PathBuf)> = fs::read_dir(run.path(&run.cfg.paths.policies))
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let seed = name.strip_prefix(prefix)?.parse().ok()?;
            Some((seed, e.path()))
        })
        .collect();
    found.sort();
    found
}

fn evaluate(run: &Run) -> Result<()> {
    let model = run.load_models()?;
    let dirs = match run.seed {
        Some(s) => vec![(s, run.policy_dir(s))],
        None => saved_seeds(run, "seed_"),
    };
    if dirs.is_empty() {
        return Err(Missing(run.policy_dir(run.cfg.train.seed)).into());
    }
    let policies = dirs
        .iter()
        .map(|(_, d)| Ok(run.load_policy(d)?.0))
        .collect::<Result<Vec<_>>>()?;
    let e = &run.cfg.eval;
    let report = evaluator::evaluate_grid(
        &policies,
        &model,
        &e.grid,
        e.n_starts,
        e.start_seed,
        run.cfg.train.horizon,
        &run.cfg.physics,
    )?;
    let dir = run.report_dir()?;
    let mut outputs = vec![dir.join("eval.json"), dir.join("eval.csv")];
    write(&outputs[0], &serde_json::to_string_pretty(&report)?)?;
    write(&outputs[1], &report.to_csv())?;
    println!("objective        real mean  +- se     virtual(H={})  virtual(250)  random", run.cfg.train.horizon);
    for r in &report.entries {
        println!(
            "{:<16} {:>9.2} {:>6.2}  {:>13.2} {:>13.2} {:>8.2}",
            r.label, r.mean_return, r.std_error, r.virtual_train_horizon_mean, r.virtual_eval_horizon_mean, r.random_policy_mean
        );
    }

    let mut specialists = Vec::new();
    for o in e.fixed_objectives() {
        let prefix = format!("specialist_{}_{}_seed_", o.omega_x, o.omega_theta);
        for (seed, d) in saved_seeds(run, &prefix) {
            let policy = run.load_policy(&d)?.0;
            specialists.push(Specialist {
                objective: o,
                seed,
                policy,
                curve: LearningCurve {
                    epochs: Vec::new(),
                    stop: trainer::StopReason::MaxEpochs,
                },
            });
        }
    }
    if !specialists.is_empty() {
        let gaps = evaluator::specialist_gaps(&policies, &specialists, e.n_starts, e.start_seed, e.specialist_tolerance, &run.cfg.physics)?;
        let path = dir.join("specialists.json");
        write(&path, &serde_json::to_string_pretty(&gaps)?)?;
        outputs.push(path);
        for g in &gaps {
            println!(
                "specialist ({}, {}): vop {:.2} specialist {:.2} gap {:.2} on par {}",
                g.objective.omega_x, g.objective.omega_theta, g.vop_mean, g.specialist_mean, g.gap, g.on_par
            );
        }
    }
    run.record("evaluate", outputs)
}

fn scenario(run: &Run) -> Result<()> {
    let seed = run.seed.unwrap_or(run.cfg.train.seed);
    let (policy, _) = run.load_policy(&run.policy_dir(seed))?;
    let thetas = match run.omega_theta {
        Some(w) => vec![w],
        None => run.cfg.eval.scenario_omega_thetas.clone(),
    };
    let dir = run.report_dir()?;
    let mut outputs = Vec::new();
    let mut flags = BTreeMap::new();
    for w in thetas {
        let r = evaluator::objective_switch_scenario(&policy, w, &run.cfg.physics)?;
        let path = dir.join(format!("scenario_seed_{seed}_theta_{w}.csv"));
        write(&path, &evaluator::episode_csv(&r.episode))?;
        outputs.push(path);
        println!(
            "omega_theta {w}: final x {:.3}, max |theta| after switch {:.3}, first reach {:?}, reached {} upright {} swung {}",
            r.flags.final_x,
            r.flags.max_abs_theta_after_switch,
            r.flags.first_reach_step,
            r.flags.reached_target,
            r.flags.kept_upright,
            r.flags.swung_through
        );
        flags.insert(format!("{w}"), r.flags);
    }
    let path = dir.join(format!("scenario_seed_{seed}.json"));
    write(&path, &serde_json::to_string_pretty(&flags)?)?;
    outputs.push(path);
    run.record("scenario", outputs)
}

fn serve(run: &Run, port: u16, tick_hz: f64) -> Result<()> {
    if !(tick_hz > 0.0 && tick_hz.is_finite()) {
        bail!("--tick-hz must be positive");
    }
    let seed = run.seed.unwrap_or(run.cfg.train.seed);
    let (policy, _) = run.load_policy(&run.policy_dir(seed))?;
    let cfg = vop_steer::SessionConfig {
        tick_hz,
        params: run.cfg.physics,
        ..vop_steer::SessionConfig::default()
    };
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let server = vop_steer::start(policy, cfg, addr).await?;
        println!("steering policy seed {seed} on http://{}", server.addr);
        server.task.await?.context("server stopped")?;
        Ok(())
    })
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.opts.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    let cfg = build_config(&cli.opts, &cli.command)?;
    let fixed = match (cli.opts.omega_x, cli.opts.omega_theta, &cli.command) {
        (Some(x), Some(t), Command::TrainPolicy) => {
            let o = Objective::new(x, t);
            if !o.in_training_box() {
                bail!("objective ({x}, {t}) outside the training box");
            }
            Some(o)
        }
        (Some(_), None, Command::TrainPolicy) | (None, Some(_), Command::TrainPolicy) => {
            bail!("a specialist needs both --omega-x and --omega-theta")
        }
        _ => None,
    };
    let run = Run {
        cfg,
        out: cli.opts.out.clone(),
        seed: cli.opts.seed,
        fixed,
        omega_theta: cli.opts.omega_theta,
    };
    match cli.command {
        Command::GenData => gen_data(&run),
        Command::TrainModels => train_models(&run),
        Command::TrainPolicy => train_policy(&run),
        Command::Evaluate => evaluate(&run),
        Command::Scenario => scenario(&run),
        Command::Serve { port, tick_hz } => serve(&run, port, tick_hz),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Missing>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
