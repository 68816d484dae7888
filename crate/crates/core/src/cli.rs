//! Command-line front end: `simulate`, `fit`, `summarize`, `contrast` and
//! `benchmark`.
//!
//! Exit codes: 0 success, 1 file-system failure, 2 invalid input or
//! configuration, 3 the run finished but the sampler diagnostics are
//! unhealthy (outputs are still written).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::fit::{fit, FitError};
use crate::inference::{contrast_all, raf_curve, InferenceError, Scenario};
use crate::io::{self, DrawsFile, IoError, RunConfig};
use crate::model::{ModelError, ModelSpec};
use crate::sampler::diagnostics::{diagnose_with_threshold, Diagnostics, DiagnosticsError};
use crate::sampler::{PosteriorDraws, SamplerConfig};
use crate::sim::{self, EventRate, Shape, SimConfig, SimError, TrueRaf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_UNHEALTHY: i32 = 3;

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const DRAWS_FILE: &str = "draws.bin";
pub const FIT_SUMMARY_FILE: &str = "fit.json";
pub const RAF_FILE: &str = "raf.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const CONTRAST_FILE: &str = "contrast.json";
pub const BENCHMARK_FILE: &str = "benchmark.csv";

#[derive(Debug, Parser)]
#[command(
    name = "flame",
    version,
    about = "Flexible accumulation model for episodic exposures"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one dataset from a known risk accumulation function.
    Simulate(SimulateArgs),
    /// Fit the model and write posterior draws.
    Fit(FitArgs),
    /// RAF curve with credible band plus convergence diagnostics.
    Summarize(SummarizeArgs),
    /// Outcome probabilities for episode scenarios and their differences.
    Contrast(ContrastArgs),
    /// Simulation benchmark: mean ISE over replicates per cell.
    Benchmark(BenchmarkArgs),
}

/// Model and sampler settings shared by the commands that need them. Flags
/// override the config file, which overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON run config with optional `model`, `sampler` and `output` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub chains: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of B-spline basis functions.
    #[arg(long = "K")]
    pub basis_size: Option<usize>,
    /// Upper end of the duration domain in minutes. `fit` defaults to the
    /// longest observed episode rounded up to a whole minute.
    #[arg(long)]
    pub domain_max: Option<f64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl RunArgs {
    fn apply_model_flags(&self, model: &mut ModelSpec<f64>) {
        if let Some(v) = self.basis_size {
            model.basis_size = v;
        }
        if let Some(v) = self.domain_max {
            model.domain_hi = v;
        }
    }

    /// Whether the upper end of the domain was given by flag or config file.
    fn domain_given(&self) -> Result<bool, CliError> {
        if self.domain_max.is_some() {
            return Ok(true);
        }
        let Some(path) = &self.config else {
            return Ok(false);
        };
        let raw: serde_json::Value = io::read_json(path)?;
        Ok(raw.pointer("/model/domain_hi").is_some())
    }

    /// Config file plus flag overrides.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => io::read_run_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.sampler.seed = v;
        }
        if let Some(v) = self.chains {
            cfg.sampler.chains = v;
        }
        if let Some(v) = self.warmup {
            cfg.sampler.warmup = v;
        }
        if let Some(v) = self.samples {
            cfg.sampler.samples = v;
        }
        self.apply_model_flags(&mut cfg.model);
        if let Some(v) = &self.out_dir {
            cfg.output.out_dir = v.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value = "linear")]
    pub shape: Shape,
    /// Nominal event rate in percent: 10, 30 or 50.
    #[arg(long, default_value = "30")]
    pub event_rate: EventRate,
    /// Number of subjects.
    #[arg(long = "I", default_value_t = 1000)]
    pub subjects: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replicate index; each index is an independent dataset.
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
    #[arg(long, default_value = "flame-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub subjects: PathBuf,
    #[arg(long)]
    pub episodes: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SummarizeArgs {
    #[arg(long)]
    pub draws: PathBuf,
    /// RAF grid spacing in minutes.
    #[arg(long)]
    pub grid_step: Option<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ContrastArgs {
    #[arg(long)]
    pub draws: PathBuf,
    /// JSON list of scenarios: `label`, `episode_durations`, `covariate_profile`.
    #[arg(long)]
    pub scenarios: PathBuf,
    /// Pairs `i:j` (1-based) reported as P(j) - P(i); defaults to the last two.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    /// JSON list of cells `{shape, event_rate, I, K}`; overrides the
    /// single-cell flags.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    pub shape: Shape,
    #[arg(long, default_value = "30")]
    pub event_rate: EventRate,
    #[arg(long = "I", default_value_t = 1000)]
    pub subjects: usize,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct GridCell {
    shape: Shape,
    /// Percent: 10, 30 or 50.
    event_rate: u32,
    #[serde(rename = "I")]
    subjects: usize,
    #[serde(rename = "K")]
    basis_size: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(e) if !e.is_validation() => EXIT_IO,
            _ => EXIT_INVALID,
        }
    }
}

/// How a successful command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Healthy,
    Unhealthy,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Healthy => EXIT_OK,
            Outcome::Unhealthy => EXIT_UNHEALTHY,
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Io(IoError::File {
            path: dir.to_path_buf(),
            source,
        })
    })
}

/// Draws are healthy when divergences stay under the limit and every
/// parameter's R-hat is under the configured threshold.
fn health(draws: &PosteriorDraws<f64>, sampler: &SamplerConfig) -> (Diagnostics, Outcome) {
    let outcome_of = |d: &Diagnostics| {
        if draws.healthy() && d.converged {
            Outcome::Healthy
        } else {
            Outcome::Unhealthy
        }
    };
    match diagnose_with_threshold(draws, sampler.rhat_threshold) {
        Ok(d) => {
            let o = outcome_of(&d);
            (d, o)
        }
        Err(e) => {
            log::warn!("{e}");
            let d = Diagnostics {
                parameters: Vec::new(),
                divergences: draws.divergences(),
                total_draws: draws.total_draws(),
                max_rhat: f64::NAN,
                min_ess_bulk: f64::NAN,
                rhat_threshold: sampler.rhat_threshold,
                converged: false,
                ess_above_draws: Vec::new(),
            };
            (d, Outcome::Unhealthy)
        }
    }
}

#[derive(Debug, Serialize)]
struct FitSummary<'a> {
    config_hash: String,
    seed: u64,
    subjects: usize,
    covariates: &'a [String],
    healthy: bool,
    divergences: usize,
    total_draws: usize,
    max_rhat: f64,
    min_ess_bulk: f64,
}

pub fn simulate(args: &SimulateArgs) -> Result<Outcome, CliError> {
    let cfg = SimConfig::new(
        TrueRaf::new(args.shape, args.event_rate),
        args.subjects,
        ModelSpec::<f64>::default().basis_size,
        args.seed,
    );
    let ds = sim::generate_dataset::<f64>(&cfg, args.replicate)?;
    ensure_dir(&args.out_dir)?;
    io::write_subjects(&args.out_dir.join(SUBJECTS_FILE), &ds)?;
    io::write_episodes(&args.out_dir.join(EPISODES_FILE), &ds)?;
    let events = ds.subjects().iter().filter(|s| s.y).count();
    log::info!(
        "simulated {} subjects ({events} events) into {}",
        ds.n_subjects(),
        args.out_dir.display()
    );
    Ok(Outcome::Healthy)
}

pub fn fit_command(args: &FitArgs) -> Result<Outcome, CliError> {
    let mut cfg = args.run.resolve()?;
    let ds = io::load_dataset(&args.subjects, &args.episodes)?;
    if !args.run.domain_given()? {
        // Longest observed episode, rounded up to a whole minute.
        if let Some(max) = ds.max_duration() {
            cfg.model.domain_hi = max.ceil();
        }
    }
    cfg.model.validate()?;
    let fitted = fit(&ds, &cfg.model, &cfg.sampler)?;
    let (diag, outcome) = health(&fitted.draws, &cfg.sampler);
    let file = DrawsFile {
        model: cfg.model.clone(),
        sampler: cfg.sampler.clone(),
        covariate_names: ds.covariate_names().to_vec(),
        draws: fitted.draws,
    };
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    file.write(&out.join(DRAWS_FILE))?;
    let summary = FitSummary {
        config_hash: file.config_hash(),
        seed: cfg.sampler.seed,
        subjects: ds.n_subjects(),
        covariates: ds.covariate_names(),
        healthy: outcome == Outcome::Healthy,
        divergences: diag.divergences,
        total_draws: diag.total_draws,
        max_rhat: diag.max_rhat,
        min_ess_bulk: diag.min_ess_bulk,
    };
    io::write_json(&out.join(FIT_SUMMARY_FILE), &summary)?;
    if outcome == Outcome::Unhealthy {
        log::warn!(
            "sampler diagnostics unhealthy: {} divergences in {} draws, max R-hat {:.3}",
            diag.divergences,
            diag.total_draws,
            diag.max_rhat
        );
    }
    Ok(outcome)
}

/// Loads draws and refuses them when the requested model spec differs from
/// the one they were fitted under. Without a config file the stored spec
/// is the starting point for the flags.
fn load_draws(path: &Path, run: &RunArgs) -> Result<(DrawsFile, RunConfig), CliError> {
    let file = DrawsFile::read(path)?;
    let mut cfg = run.resolve()?;
    if run.config.is_none() {
        cfg.model = file.model.clone();
        run.apply_model_flags(&mut cfg.model);
    }
    file.check_model(path, &cfg.model)?;
    cfg.sampler.rhat_threshold = file.sampler.rhat_threshold;
    Ok((file, cfg))
}

pub fn summarize(args: &SummarizeArgs) -> Result<Outcome, CliError> {
    let (file, cfg) = load_draws(&args.draws, &args.run)?;
    let kv = file.model.knots()?;
    let step = args.grid_step.unwrap_or(cfg.output.grid_step);
    let est = raf_curve(&file.draws, file.covariate_names.len(), &kv, step)?;
    let (diag, outcome) = health(&file.draws, &cfg.sampler);
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    std::fs::write(out.join(RAF_FILE), est.to_csv()).map_err(|source| {
        CliError::Io(IoError::File {
            path: out.join(RAF_FILE),
            source,
        })
    })?;
    io::write_json(&out.join(DIAGNOSTICS_FILE), &diag)?;
    Ok(outcome)
}

fn parse_pairs(raw: &[String], n: usize) -> Result<Vec<(usize, usize)>, CliError> {
    if raw.is_empty() {
        return if n >= 2 {
            Ok(vec![(n - 2, n - 1)])
        } else {
            Ok(Vec::new())
        };
    }
    raw.iter()
        .map(|p| {
            let bad = || CliError::Usage(format!("pair '{p}' must be i:j with 1 <= i, j <= {n}"));
            let (a, b) = p.split_once(':').ok_or_else(bad)?;
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a == 0 || b == 0 || a > n || b > n {
                return Err(bad());
            }
            Ok((a - 1, b - 1))
        })
        .collect()
}

pub fn contrast(args: &ContrastArgs) -> Result<Outcome, CliError> {
    let (file, cfg) = load_draws(&args.draws, &args.run)?;
    let scenarios: Vec<Scenario> = io::read_json(&args.scenarios)?;
    if scenarios.is_empty() {
        return Err(CliError::Usage(
            "the scenarios file lists no scenarios".into(),
        ));
    }
    let pairs = parse_pairs(&args.pairs, scenarios.len())?;
    let kv = file.model.knots()?;
    let result = contrast_all(
        &file.draws,
        file.covariate_names.len(),
        &kv,
        &scenarios,
        &pairs,
    )?;
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    io::write_json(&out.join(CONTRAST_FILE), &result)?;
    Ok(Outcome::Healthy)
}

pub fn benchmark(args: &BenchmarkArgs) -> Result<Outcome, CliError> {
    let cfg = args.run.resolve()?;
    let basis_size = args.run.basis_size.unwrap_or(cfg.model.basis_size);
    let cells: Vec<GridCell> = match &args.grid {
        Some(path) => io::read_json(path)?,
        None => vec![GridCell {
            shape: args.shape,
            event_rate: args.event_rate.percent(),
            subjects: args.subjects,
            basis_size,
        }],
    };
    let configs = cells
        .iter()
        .map(|c| {
            let rate: EventRate = c.event_rate.to_string().parse()?;
            Ok(SimConfig {
                replicates: args.replicates,
                ..SimConfig::new(
                    TrueRaf::new(c.shape, rate),
                    c.subjects,
                    c.basis_size,
                    cfg.sampler.seed,
                )
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let rows = sim::run_benchmark(&configs, &cfg.sampler)?;
    let out = &cfg.output.out_dir;
    ensure_dir(out)?;
    io::write_csv_rows(&out.join(BENCHMARK_FILE), &rows)?;
    Ok(Outcome::Healthy)
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit_command(a),
        Command::Summarize(a) => summarize(a),
        Command::Contrast(a) => contrast(a),
        Command::Benchmark(a) => benchmark(a),
    }
}

/// Parses `args`, runs the command and maps the result to an exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    match run(&cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
