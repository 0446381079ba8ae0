use clap::{Parser, Subcommand};
use crossmimic::actionspace::{trajectory_from_csv, trajectory_to_csv, ActionMask, ActionVector, Side};
use crossmimic::config::{ConfigError, ExperimentConfig, SeedStream};
use crossmimic::dataset::{
    compute_norm_stats, manifest, read_dataset, write_dataset, DatasetError, Demonstration, Embodiment,
};
use crossmimic::eval::{evaluate, oracle_for, robot_observation, eval_episodes, EvalError, LearnedPolicy};
use crossmimic::pipeline;
use crossmimic::policy::checkpoint::{load_checkpoint, save_checkpoint};
use crossmimic::policy::train::{train, TrainState, METRICS_HEADER};
use crossmimic::policy::{GradFault, PolicyError};
use crossmimic::retarget::{retarget_trajectory, Direction, RetargetError};
use crossmimic::selftest::run_selftest;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Human/robot retargeting and cross-embodiment policy experiments.
#[derive(Parser)]
#[command(name = "crossmimic", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in toy config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Retarget a trajectory CSV between embodiments.
    Retarget {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// h2r or r2h
        #[arg(long)]
        direction: Direction,
        /// Per-step report CSV [default: <output>.report.csv]
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate, augment and write the synthetic dataset and its manifest.
    BuildDataset {
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write each demo's native trajectory as CSV into this directory.
        #[arg(long)]
        export_trajectories: Option<PathBuf>,
    },
    /// Normalization statistics of the training split.
    Stats {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a policy; writes a checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps instead of `train.steps`.
        #[arg(long)]
        until: Option<usize>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Closed-loop rollouts; prints a table and writes a CSV report.
    Eval {
        #[arg(long, conflicts_with_all = ["oracle", "untrained"])]
        checkpoint: Option<PathBuf>,
        /// Replay the scripted paths instead of a policy.
        #[arg(long)]
        oracle: bool,
        /// Evaluate freshly initialized parameters.
        #[arg(long)]
        untrained: bool,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sample one action chunk at the start of an evaluation episode.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Jacobian, IK, gradient, loss, retarget and checkpoint checks.
    Selftest {
        /// Corrupt this tensor's analytic gradient (exercises the checker).
        #[arg(long)]
        fault_tensor: Option<String>,
        #[arg(long, default_value_t = 2.0)]
        fault_scale: f64,
    },
}

/// Failure classes mapped to exit codes 2, 3 and 4.
#[derive(Debug)]
enum Failure {
    Config(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        let m = e.to_string();
        match e {
            DatasetError::InvalidArgument(_) => Failure::Config(m),
            DatasetError::TaskUnreachable(_) | DatasetError::Retarget(_) => Failure::Numeric(m),
            _ => Failure::Io(m),
        }
    }
}

impl From<PolicyError> for Failure {
    fn from(e: PolicyError) -> Self {
        let m = e.to_string();
        match e {
            PolicyError::ShapeMismatch(_) | PolicyError::InvalidConfig(_) | PolicyError::UnknownInstruction { .. } => {
                Failure::Config(m)
            }
            PolicyError::Checkpoint(_) | PolicyError::Io(_) => Failure::Io(m),
            PolicyError::NonFinite { .. } | PolicyError::NonFiniteLoss { .. } => Failure::Numeric(m),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Policy(p) => p.into(),
            EvalError::Dataset(d) => d.into(),
            EvalError::Invalid(m) => Failure::Config(m),
        }
    }
}

impl From<RetargetError> for Failure {
    fn from(e: RetargetError) -> Self {
        let m = e.to_string();
        match e {
            RetargetError::EmptyTrajectory | RetargetError::LengthMismatch(..) | RetargetError::Io(_) => {
                Failure::Io(m)
            }
            RetargetError::InvalidConfig(_) => Failure::Config(m),
            RetargetError::Geometry(_) | RetargetError::Kinematics(_) => Failure::Numeric(m),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    Ok(match &cli.config {
        Some(p) => ExperimentConfig::load(p, &cli.overrides)?,
        None => {
            let cwd = Path::new(".");
            ExperimentConfig::from_toml_str(&ExperimentConfig::toy().to_toml(), &cli.overrides, cwd)?
        }
    })
}

fn dataset_path(cfg: &ExperimentConfig, arg: &Option<PathBuf>) -> PathBuf {
    arg.clone().unwrap_or_else(|| cfg.out_dir().join("dataset.bin"))
}

fn load_demos(path: &Path) -> Result<Vec<Demonstration>, Failure> {
    if !path.exists() {
        return Err(Failure::Io(format!("{} not found; run build-dataset first", path.display())));
    }
    Ok(read_dataset(path)?.1)
}

fn cmd_retarget(
    cfg: &ExperimentConfig,
    input: &Path,
    output: &Path,
    direction: Direction,
    report: Option<PathBuf>,
) -> Result<String, Failure> {
    let rc = cfg.retarget_config()?;
    let text = read_text(input)?;
    if text.trim().is_empty() {
        return Err(Failure::Io(format!("{}: input file is empty", input.display())));
    }
    let rows = trajectory_from_csv(&text).map_err(|e| io_err(input, e))?;
    let (out, rep) = retarget_trajectory(&rows, direction, &rc).map_err(|e| match e {
        RetargetError::InvalidConfig(m) => io_err(input, m),
        e => e.into(),
    })?;
    write_file(output, trajectory_to_csv(&out))?;
    let report = report.unwrap_or_else(|| output.with_extension("report.csv"));
    let mut buf = Vec::new();
    rep.write_csv(&mut buf)?;
    write_file(&report, buf)?;
    Ok(format!(
        "retargeted {} steps; {} IK failures; max position residual {:.3e} m\nwrote {}\nwrote {}\n",
        out.len(),
        rep.failures(),
        rep.max_pos_residual(),
        output.display(),
        report.display()
    ))
}

/// The demo's own embodiment dims for both sides; the idle side is held
/// in place, so every stored state carries it.
fn native_trajectory(d: &Demonstration) -> Vec<(ActionVector, ActionMask)> {
    let native = d.embodiment.native_mask(&Side::BOTH);
    let mut rows = Vec::with_capacity(d.steps.len() + 1);
    if let Some(s) = d.steps.first() {
        rows.push((s.proprio, native));
    }
    rows.extend(d.steps.iter().map(|s| (s.label, native)));
    rows
}

fn cmd_build_dataset(cfg: &ExperimentConfig, output: &Option<PathBuf>, export: &Option<PathBuf>) -> Result<String, Failure> {
    let rc = cfg.retarget_config()?;
    let demos = pipeline::build_demos(cfg, &rc)?;
    let path = dataset_path(cfg, output);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    write_dataset(&demos, cfg.horizon(), &path)?;
    let manifest_path = path.with_file_name("manifest.txt");
    write_file(&manifest_path, manifest(&demos))?;
    if let Some(dir) = export {
        for d in &demos {
            write_file(&dir.join(format!("demo_{:04}.csv", d.id)), trajectory_to_csv(&native_trajectory(d)))?;
        }
    }
    let (train, heldout) = pipeline::split(cfg, &demos);
    let steps: usize = demos.iter().map(|d| d.steps.len()).sum();
    let masked = demos
        .iter()
        .filter(|d| d.embodiment == Embodiment::Human)
        .flat_map(|d| {
            let m = ActionMask::robot_sides(&d.active_sides());
            d.steps.iter().filter(move |s| !s.label_mask.contains(&m))
        })
        .count();
    let mut s = String::new();
    let count = |e: Embodiment| demos.iter().filter(|d| d.embodiment == e).count();
    writeln!(s, "demos            {} robot, {} human", count(Embodiment::Robot), count(Embodiment::Human)).ok();
    writeln!(s, "steps            {steps}").ok();
    writeln!(s, "ik-masked steps  {masked}").ok();
    writeln!(s, "train demos      {} ({} samples)", train.len(), pipeline::training_samples(cfg, &train).len()).ok();
    writeln!(s, "held-out demos   {} ({} samples)", heldout.len(), pipeline::heldout_samples(cfg, &heldout).len()).ok();
    writeln!(s, "wrote {}", path.display()).ok();
    writeln!(s, "wrote {}", manifest_path.display()).ok();
    Ok(s)
}

fn cmd_stats(cfg: &ExperimentConfig, dataset: &Option<PathBuf>, output: &Option<PathBuf>) -> Result<String, Failure> {
    let demos = load_demos(&dataset_path(cfg, dataset))?;
    let (train, _) = pipeline::split(cfg, &demos);
    let stats = compute_norm_stats(&train);
    let path = output.clone().unwrap_or_else(|| cfg.out_dir().join("norm_stats.csv"));
    write_file(&path, stats.to_csv())?;
    let block = |r: std::ops::Range<usize>| {
        let n = r.len() as f64;
        let mean = r.clone().map(|i| stats.mean[i].abs()).sum::<f64>() / n;
        let std = r.map(|i| stats.std[i]).sum::<f64>() / n;
        (mean, std)
    };
    use crossmimic::actionspace::dims;
    let mut s = format!("{:<8} {:>5} {:>12} {:>12}\n", "block", "dims", "mean|mean|", "mean std");
    for (name, r) in [("human", dims::human()), ("robot", dims::robot()), ("eef", dims::eef())] {
        let (m, sd) = block(r.clone());
        writeln!(s, "{name:<8} {:>5} {m:>12.5} {sd:>12.5}", r.len()).ok();
    }
    writeln!(s, "train demos {}; wrote {}", train.len(), path.display()).ok();
    Ok(s)
}

fn metrics_prefix(path: &Path, upto: usize) -> Result<String, Failure> {
    let mut s = format!("{METRICS_HEADER}\n");
    if upto == 0 {
        return Ok(s);
    }
    let text = read_text(path)?;
    for line in text.lines().skip(1) {
        let step: usize = line
            .split(',')
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| io_err(path, "malformed metrics row"))?;
        if step < upto {
            s.push_str(line);
            s.push('\n');
        }
    }
    Ok(s)
}

fn cmd_train(
    cfg: &ExperimentConfig,
    dataset: &Option<PathBuf>,
    resume: &Option<PathBuf>,
    until: Option<usize>,
    checkpoint: &Option<PathBuf>,
    metrics: &Option<PathBuf>,
) -> Result<String, Failure> {
    let demos = load_demos(&dataset_path(cfg, dataset))?;
    let (train_demos, _) = pipeline::split(cfg, &demos);
    let samples = pipeline::training_samples(cfg, &train_demos);
    let mut state: TrainState = match resume {
        Some(p) => load_checkpoint(p, Some(&cfg.model))?,
        None => pipeline::fresh_state(cfg, &train_demos)?,
    };
    let until = until.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    let metrics_path = metrics.clone().unwrap_or_else(|| cfg.out_dir().join("metrics.csv"));
    let ckpt_path = checkpoint.clone().unwrap_or_else(|| cfg.out_dir().join("checkpoint.bin"));
    let mut log = metrics_prefix(&metrics_path, if resume.is_some() { state.step } else { 0 })?;
    let start = state.step;
    let mut last = None;
    train(&mut state, &samples, &cfg.train, until, |row, _| {
        log.push_str(&row.csv_line());
        log.push('\n');
        last = Some(*row);
    })?;
    write_file(&metrics_path, &log)?;
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    save_checkpoint(&state, &ckpt_path)?;
    let mut s = format!("trained steps {start}..{} on {} samples\n", state.step, samples.len());
    if let Some(r) = last {
        writeln!(s, "last step        l_r2h {:.6} l_h2r {:.6} total {:.6}", r.l_r2h, r.l_h2r, r.total).ok();
    }
    writeln!(s, "wrote {}", metrics_path.display()).ok();
    writeln!(s, "wrote {}", ckpt_path.display()).ok();
    Ok(s)
}

fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Option<PathBuf>,
    oracle: bool,
    untrained: bool,
    dataset: &Option<PathBuf>,
    output: &Option<PathBuf>,
) -> Result<String, Failure> {
    let rc = cfg.retarget_config()?;
    let ds = dataset_path(cfg, dataset);
    let report = if oracle {
        let o = oracle_for(&cfg.task, &rc, &cfg.eval, cfg.horizon())?;
        evaluate(&o, &cfg.task, &rc, &cfg.eval, None)?
    } else {
        let policy = match (checkpoint, untrained) {
            (Some(p), _) => load_checkpoint(p, Some(&cfg.model))?.averaged_policy(),
            (None, true) => {
                let (train, _) = pipeline::split(cfg, &load_demos(&ds)?);
                pipeline::fresh_state(cfg, &train)?.policy
            }
            (None, false) => return Err(Failure::Config("eval needs --checkpoint, --oracle or --untrained".into())),
        };
        let mse = if ds.exists() {
            let (_, heldout) = pipeline::split(cfg, &load_demos(&ds)?);
            Some(pipeline::heldout_mse(cfg, &policy, &pipeline::heldout_samples(cfg, &heldout))?)
        } else {
            None
        };
        let lp = LearnedPolicy {
            policy: &policy,
            sampler: cfg.eval.sampler(),
        };
        evaluate(&lp, &cfg.task, &rc, &cfg.eval, mse)?
    };
    let path = output.clone().unwrap_or_else(|| cfg.out_dir().join("eval.csv"));
    write_file(&path, report.to_csv())?;
    Ok(format!("{}wrote {}\n", report.to_table(), path.display()))
}

fn cmd_sample(cfg: &ExperimentConfig, checkpoint: &Path, episode: usize, output: &Option<PathBuf>) -> Result<String, Failure> {
    let rc = cfg.retarget_config()?;
    let policy = load_checkpoint(checkpoint, Some(&cfg.model))?.averaged_policy();
    let mut ev = cfg.eval.clone();
    ev.rollouts = episode + 1;
    let eps = eval_episodes(&cfg.task, &rc, &ev)?;
    let (ep, _) = &eps[episode];
    let obs = robot_observation(ep, &rc.home, &rc);
    let mask = crossmimic::dataset::task_output_mask(ep.instruction_id);
    let seed = cfg.seed_for(SeedStream::Sample).wrapping_add(episode as u64);
    let chunk = policy.sample_actions(&obs, &mask, cfg.eval.sampler(), seed)?;
    let rows: Vec<(ActionVector, ActionMask)> = chunk.rows.iter().copied().zip(chunk.masks.iter().copied()).collect();
    let path = output.clone().unwrap_or_else(|| cfg.out_dir().join(format!("sample_{episode}.csv")));
    write_file(&path, trajectory_to_csv(&rows))?;
    let side: Side = ep.side();
    Ok(format!(
        "episode {episode}: task {} ({side} arm), object {:?}, goal {:?}\nsampled {} rows\nwrote {}\n",
        crossmimic::dataset::TASK_NAMES[ep.instruction_id as usize],
        ep.object.as_slice(),
        ep.goal.as_slice(),
        rows.len(),
        path.display()
    ))
}

fn cmd_selftest(cfg: &ExperimentConfig, fault_tensor: &Option<String>, scale: f64) -> Result<String, Failure> {
    let fault = fault_tensor.as_ref().map(|t| GradFault {
        tensor: t.clone(),
        scale,
    });
    if let Some(f) = &fault {
        let p = crossmimic::policy::PolicyParams::zeros(&cfg.model)?;
        if p.spec(&f.tensor).is_none() {
            let names: Vec<&str> = p.layout.iter().map(|t| t.name.as_str()).collect();
            return Err(Failure::Config(format!("unknown tensor `{}`; known: {}", f.tensor, names.join(", "))));
        }
    }
    let results = run_selftest(cfg, fault.as_ref());
    let mut s: String = results.iter().map(|r| format!("{r}\n")).collect();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        s.push_str("all checks passed\n");
        Ok(s)
    } else {
        print!("{s}");
        let detail = results.iter().filter(|r| !r.passed).map(|r| r.detail.as_str()).collect::<Vec<_>>().join("; ");
        Err(Failure::Numeric(format!("failed checks: {} ({detail})", failed.join(", "))))
    }
}

fn run(cli: &Cli) -> Result<String, Failure> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Retarget {
            input,
            output,
            direction,
            report,
        } => cmd_retarget(&cfg, input, output, *direction, report.clone()),
        Command::BuildDataset {
            output,
            export_trajectories,
        } => cmd_build_dataset(&cfg, output, export_trajectories),
        Command::Stats { dataset, output } => cmd_stats(&cfg, dataset, output),
        Command::Train {
            dataset,
            resume,
            until,
            checkpoint,
            metrics,
        } => cmd_train(&cfg, dataset, resume, *until, checkpoint, metrics),
        Command::Eval {
            checkpoint,
            oracle,
            untrained,
            dataset,
            output,
        } => cmd_eval(&cfg, checkpoint, *oracle, *untrained, dataset, output),
        Command::Sample {
            checkpoint,
            episode,
            output,
        } => cmd_sample(&cfg, checkpoint, *episode, output),
        Command::Selftest {
            fault_tensor,
            fault_scale,
        } => cmd_selftest(&cfg, fault_tensor, *fault_scale),
    }
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("CROSSMIMIC_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("CROSSMIMIC_THREADS={v} is not a thread count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(&cli)) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
