//! Command-line front end: single episodes, Monte-Carlo batches, the bias
//! sweep and violation histograms.
//!
//! Every command reads a scenario JSON and an optional planner-config JSON
//! and writes its results into `--out`, creating the directory if needed.
//! Files are written atomically.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baseline::gaussianize_scenario;
use crate::error::{Error, Result};
use crate::io::{csv_err, load_config, load_json, load_scenario, write_atomic, write_json};
use crate::noise::BiasSweep;
use crate::planner::{pair_seed, PlannerConfig};
use crate::sim::{metrics, monte_carlo, run_episode_with, MonteCarloReport, PlannerMode, Scenario, Side};
use crate::vo::{constraint_vector_with_cone, violation};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "MMD_AVOID_THREADS";

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_JSON: &str = "sweep.json";
pub const HIST_H_FILE: &str = "histogram_h.csv";
pub const HIST_F_FILE: &str = "histogram_f.csv";

#[derive(Debug, Parser)]
#[command(name = "mmd-avoid", version, about = "Sampling-based collision avoidance under non-Gaussian noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one episode; writes trajectory.csv and metrics.json.
    Run(CommonArgs),
    /// Run a batch of episodes; writes report.json.
    Montecarlo {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
    },
    /// Bias-level sweep in both planner modes; writes sweep.csv and sweep.json.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// JSON overriding the parameters of the bias-sweep family.
        #[arg(long)]
        bias: Option<PathBuf>,
    },
    /// Violation values of the chosen control at one step; writes
    /// histogram_h.csv and histogram_f.csv.
    Histogram {
        #[command(flatten)]
        common: CommonArgs,
        /// Step index, counted from 0, or `last`.
        #[arg(long)]
        step: StepIndex,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Planner configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Episode seed (base seed for batches); the scenario's seed by default.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Gaussian,
}

impl From<ModeArg> for PlannerMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Exact => PlannerMode::Exact,
            ModeArg::Gaussian => PlannerMode::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepIndex {
    At(usize),
    Last,
}

impl FromStr for StepIndex {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "last" {
            return Ok(StepIndex::Last);
        }
        s.parse().map(StepIndex::At).map_err(|_| format!("expected a step index or `last`, got `{s}`"))
    }
}

impl fmt::Display for StepIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepIndex::At(i) => write!(f, "{i}"),
            StepIndex::Last => f.write_str("last"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Run,
    Montecarlo,
    Sweep,
    Histogram,
}

/// Fully resolved invocation.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub command: CommandKind,
    pub scenario: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub runs: usize,
    pub seed: Option<u64>,
    pub mode: PlannerMode,
    pub step: Option<StepIndex>,
    pub bias: Option<PathBuf>,
}

impl RunSpec {
    pub fn new(command: CommandKind, scenario: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            command,
            scenario: scenario.into(),
            config: None,
            out: out.into(),
            runs: 100,
            seed: None,
            mode: PlannerMode::Exact,
            step: None,
            bias: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenario.as_os_str().is_empty() || self.out.as_os_str().is_empty() {
            return Err(Error::Argument("scenario and output paths must be non-empty".into()));
        }
        if matches!(self.config.as_deref(), Some(p) if p.as_os_str().is_empty()) {
            return Err(Error::Argument("config path must be non-empty".into()));
        }
        if self.runs == 0 {
            return Err(Error::Argument("runs must be at least 1".into()));
        }
        if self.command == CommandKind::Histogram && self.step.is_none() {
            return Err(Error::Argument("histogram needs a step".into()));
        }
        Ok(())
    }

    fn load(&self) -> Result<(Scenario, PlannerConfig)> {
        self.validate()?;
        let scenario = load_scenario(&self.scenario)?;
        let config = match &self.config {
            Some(p) => load_config(p)?,
            None => PlannerConfig::default(),
        };
        fs::create_dir_all(&self.out).map_err(|source| Error::Io { path: self.out.clone(), source })?;
        Ok((scenario, config))
    }

    fn seed_for(&self, scenario: &Scenario) -> u64 {
        self.seed.unwrap_or(scenario.seed)
    }
}

impl From<Cli> for RunSpec {
    fn from(cli: Cli) -> Self {
        let with = |kind, c: CommonArgs| RunSpec {
            config: c.config,
            seed: c.seed,
            mode: c.mode.into(),
            ..RunSpec::new(kind, c.scenario, c.out)
        };
        match cli.command {
            Command::Run(c) => with(CommandKind::Run, c),
            Command::Montecarlo { common, runs } => RunSpec { runs, ..with(CommandKind::Montecarlo, common) },
            Command::Sweep { common, runs, bias } => RunSpec { runs, bias, ..with(CommandKind::Sweep, common) },
            Command::Histogram { common, step } => RunSpec { step: Some(step), ..with(CommandKind::Histogram, common) },
        }
    }
}

/// Belief the planner samples from in `mode`.
fn belief_for(scenario: &Scenario, mode: PlannerMode, seed: u64) -> Result<crate::sim::Belief> {
    Ok(match mode {
        PlannerMode::Exact => scenario.belief(),
        PlannerMode::Gaussian => gaussianize_scenario(scenario, seed)?.belief(),
    })
}

/// One episode: `trajectory.csv` plus `metrics.json`.
pub fn cmd_run(spec: &RunSpec) -> Result<()> {
    let (scenario, config) = spec.load()?;
    let seed = spec.seed_for(&scenario);
    let belief = belief_for(&scenario, spec.mode, seed)?;
    let log = run_episode_with(&scenario, &belief, &config, seed, |_| {})?;
    let csv_path = spec.out.join(TRAJECTORY_FILE);
    write_atomic(&csv_path, |w| log.write_csv(w).map_err(csv_err(&csv_path)))?;
    write_json(&spec.out.join(METRICS_FILE), &metrics(&log, &scenario, &config))
}

/// A Monte-Carlo batch: `report.json` with per-seed outcomes in seed order.
pub fn cmd_montecarlo(spec: &RunSpec) -> Result<MonteCarloReport> {
    let (scenario, config) = spec.load()?;
    let report = monte_carlo(&scenario, &config, spec.runs, spec.seed_for(&scenario), spec.mode)?;
    write_json(&spec.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: u32,
    pub mode: PlannerMode,
    pub favorable_freq: f64,
    pub mean_coll_frac: f64,
    pub mean_smoothness: f64,
}

/// `scenario` with the zero-mean bias-family model of level `k` as every
/// obstacle's position noise.
pub fn with_bias_level(scenario: &Scenario, sweep: &BiasSweep, k: u32) -> Result<Scenario> {
    let model = sweep.model(k)?.centered();
    let mut s = scenario.clone();
    s.obstacles.iter_mut().for_each(|o| o.position_noise = model.clone());
    Ok(s)
}

/// Every bias level in both modes: `sweep.csv` (one row per level and
/// mode) and `sweep.json` (the full reports).
pub fn cmd_sweep(spec: &RunSpec) -> Result<Vec<SweepRow>> {
    let (scenario, config) = spec.load()?;
    if scenario.favorable_side == Side::None {
        return Err(Error::Config("sweep needs a scenario with favorable_side set".into()));
    }
    if scenario.obstacles.len() != 1 {
        return Err(Error::Unsupported("sweep needs a single-obstacle scenario".into()));
    }
    let sweep: BiasSweep = match &spec.bias {
        Some(p) => load_json(p)?,
        None => BiasSweep::default(),
    };
    let seed = spec.seed_for(&scenario);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for k in 1..=sweep.levels {
        let s = with_bias_level(&scenario, &sweep, k)?;
        for mode in [PlannerMode::Exact, PlannerMode::Gaussian] {
            let r = monte_carlo(&s, &config, spec.runs, seed, mode)?;
            rows.push(SweepRow {
                k,
                mode,
                favorable_freq: r.favorable_freq.unwrap_or(f64::NAN),
                mean_coll_frac: r.mean_max_collision_fraction,
                mean_smoothness: r.mean_smoothness,
            });
            reports.push((k, r));
        }
    }
    let csv_path = spec.out.join(SWEEP_CSV);
    write_atomic(&csv_path, |w| {
        let mut out = csv::Writer::from_writer(w);
        rows.iter().try_for_each(|r| out.serialize(r)).map_err(csv_err(&csv_path))?;
        out.flush().map_err(|source| Error::Io { path: csv_path.clone(), source })
    })?;
    #[derive(Serialize)]
    struct Level<'a> {
        k: u32,
        report: &'a MonteCarloReport,
    }
    let levels: Vec<Level> = reports.iter().map(|(k, report)| Level { k: *k, report }).collect();
    write_json(&spec.out.join(SWEEP_JSON), &levels)?;
    Ok(rows)
}

/// Signed and floored constraint values of one planning step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Histogram {
    pub step: usize,
    /// `(obstacle, robot sample, obstacle sample, f)` per evaluated pair.
    pub values: Vec<(usize, usize, usize, f64)>,
}

impl Histogram {
    pub fn f(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().map(|v| v.3)
    }

    pub fn h(&self) -> impl Iterator<Item = f64> + '_ {
        self.f().map(violation)
    }

    fn write(&self, path: &Path, floor: bool) -> Result<()> {
        write_atomic(path, |w| {
            let mut out = csv::Writer::from_writer(w);
            let name = if floor { "h" } else { "f" };
            out.write_record(["obstacle", "robot_sample", "obstacle_sample", name]).map_err(csv_err(path))?;
            for &(j, p, q, f) in &self.values {
                let v = if floor { violation(f) } else { f };
                out.write_record([j.to_string(), p.to_string(), q.to_string(), v.to_string()])
                    .map_err(csv_err(path))?;
            }
            out.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
        })
    }
}

/// Constraint values seen by the planner for its chosen control at `step`,
/// under the planning radius and the configured cone. Pairs match the ones
/// the planner scored.
pub fn step_histogram(
    scenario: &Scenario,
    config: &PlannerConfig,
    mode: PlannerMode,
    seed: u64,
    step: StepIndex,
) -> Result<Histogram> {
    let belief = belief_for(scenario, mode, seed)?;
    let mut seen: Vec<Result<Histogram>> = Vec::new();
    let log = run_episode_with(scenario, &belief, config, seed, |view| {
        if step == StepIndex::Last || step == StepIndex::At(view.step) {
            let collect = || -> Result<Histogram> {
                let mut values = Vec::new();
                for (j, obs) in view.obstacle_samples.iter().enumerate() {
                    let (f, pairs) = constraint_vector_with_cone(
                        view.robot_samples,
                        view.plan.control,
                        view.control_noise,
                        obs,
                        scenario.planning_radius(),
                        scenario.dt,
                        config.pair_budget,
                        pair_seed(view.plan_seed, j),
                        config.cone,
                    )?;
                    values.extend(pairs.iter().zip(f).map(|(&(p, q), f)| (j, p, q, f)));
                }
                Ok(Histogram { step: view.step, values })
            };
            // only the final match is kept for `last`
            seen.clear();
            seen.push(collect());
        }
    })?;
    match (step, seen.pop()) {
        (_, Some(h)) => h,
        (StepIndex::At(index), None) => Err(Error::OutOfRange { index, len: log.steps.len() }),
        (StepIndex::Last, None) => Err(Error::OutOfRange { index: 0, len: 0 }),
    }
}

/// Violation histogram data: `histogram_h.csv` and `histogram_f.csv`.
pub fn cmd_histogram(spec: &RunSpec) -> Result<Histogram> {
    let step = spec.step.ok_or_else(|| Error::Argument("histogram needs a step".into()))?;
    let (scenario, config) = spec.load()?;
    let hist = step_histogram(&scenario, &config, spec.mode, spec.seed_for(&scenario), step)?;
    hist.write(&spec.out.join(HIST_H_FILE), true)?;
    hist.write(&spec.out.join(HIST_F_FILE), false)?;
    Ok(hist)
}

/// Dispatches `spec` to its command.
pub fn execute(spec: &RunSpec) -> Result<()> {
    match spec.command {
        CommandKind::Run => cmd_run(spec),
        CommandKind::Montecarlo => cmd_montecarlo(spec).map(drop),
        CommandKind::Sweep => cmd_sweep(spec).map(drop),
        CommandKind::Histogram => cmd_histogram(spec).map(drop),
    }
}

/// 0 on success, 1 for usage and configuration errors, 2 for failures
/// while running.
pub fn exit_code(result: &Result<()>) -> u8 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_usage() => 1,
        Err(_) => 2,
    }
}

/// Sizes the global rayon pool from [`THREADS_ENV`] when it is set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}

/// Parses `args`, runs the command and returns the process exit code.
/// Messages go to `err`.
pub fn main_with_args<I, T>(args: I, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| execute(&RunSpec::from(cli)));
    if let Err(e) = &result {
        let _ = writeln!(err, "error: {e}");
    }
    exit_code(&result)
}
