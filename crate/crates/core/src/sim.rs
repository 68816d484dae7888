//! Simulation study: the generative process, the true risk accumulation
//! functions, ISE scoring and the benchmark grid.
//!
//! Every subject draws from its own ChaCha stream keyed by
//! `(seed, replicate)` with the subject index as stream id, so a dataset is
//! the same whatever the thread count or the order subjects are visited in.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fit::{fit, FitError};
use crate::inference::{posterior_mean_curve, InferenceError, RafEstimate};
use crate::model::{DataError, Dataset, Episode, ModelSpec, SubjectRecord};
use crate::sampler::{stream_rng, SamplerConfig};
use crate::scalar::Real;

/// Intercept and slope of the fixed effects in every simulated dataset.
pub const TRUE_BETA: [f64; 2] = [-3.5, 0.1];
/// Upper end of the simulated duration support `(0, 30]`.
pub const DURATION_MAX: f64 = 30.0;
/// Largest simulated episode count; counts are uniform on `0..=15`.
pub const MAX_EPISODES: u32 = 15;
/// Quadrature points used by [`ise`].
pub const ISE_POINTS: usize = 3001;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("unknown {what} '{value}'")]
    Parse { what: &'static str, value: String },
    #[error("estimate grid [{lo}, {hi}] does not span [0, {DURATION_MAX}]")]
    GridSpan { lo: f64, hi: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Linear,
    PiecewiseLinear,
    Logarithm,
    Sigmoid,
}

impl Shape {
    pub const ALL: [Shape; 4] = [
        Shape::Linear,
        Shape::PiecewiseLinear,
        Shape::Logarithm,
        Shape::Sigmoid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Linear => "linear",
            Shape::PiecewiseLinear => "piecewise_linear",
            Shape::Logarithm => "logarithm",
            Shape::Sigmoid => "sigmoid",
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Shape {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "linear" => Ok(Shape::Linear),
            "piecewise_linear" | "piecewise" => Ok(Shape::PiecewiseLinear),
            "logarithm" | "log" => Ok(Shape::Logarithm),
            "sigmoid" => Ok(Shape::Sigmoid),
            _ => Err(SimError::Parse {
                what: "shape",
                value: s.to_string(),
            }),
        }
    }
}

/// Nominal event rate a true RAF was scaled for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventRate {
    #[serde(rename = "10")]
    Ten,
    #[serde(rename = "30")]
    Thirty,
    #[serde(rename = "50")]
    Fifty,
}

impl EventRate {
    pub const ALL: [EventRate; 3] = [EventRate::Ten, EventRate::Thirty, EventRate::Fifty];

    pub fn percent(self) -> u32 {
        match self {
            EventRate::Ten => 10,
            EventRate::Thirty => 30,
            EventRate::Fifty => 50,
        }
    }

    pub fn fraction(self) -> f64 {
        f64::from(self.percent()) / 100.0
    }
}

impl fmt::Display for EventRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.percent())
    }
}

impl FromStr for EventRate {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.trim().trim_end_matches('%') {
            "10" | "0.1" => Ok(EventRate::Ten),
            "30" | "0.3" => Ok(EventRate::Thirty),
            "50" | "0.5" => Ok(EventRate::Fifty),
            _ => Err(SimError::Parse {
                what: "event rate",
                value: s.to_string(),
            }),
        }
    }
}

/// One of the twelve true risk accumulation functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrueRaf {
    pub shape: Shape,
    pub event_rate: EventRate,
}

impl TrueRaf {
    pub fn new(shape: Shape, event_rate: EventRate) -> Self {
        Self { shape, event_rate }
    }

    /// The multiplier in front of the shape's base curve.
    pub fn scale(&self) -> f64 {
        use EventRate::*;
        match (self.shape, self.event_rate) {
            (Shape::Linear, Ten) => 0.03 / 3.0,
            (Shape::Linear, Thirty) => 0.065 / 3.0,
            (Shape::Linear, Fifty) => 0.1 / 3.0,
            (Shape::PiecewiseLinear, Ten) => 0.1 / 3.0,
            (Shape::PiecewiseLinear, Thirty) => 0.25 / 3.0,
            (Shape::PiecewiseLinear, Fifty) => 0.45 / 3.0,
            (Shape::Logarithm, Ten) => 0.06,
            (Shape::Logarithm, Thirty) => 0.12,
            (Shape::Logarithm, Fifty) => 0.2,
            (Shape::Sigmoid, Ten) => 0.2,
            (Shape::Sigmoid, Thirty) => 0.4,
            (Shape::Sigmoid, Fifty) => 0.6,
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let a = self.scale();
        match self.shape {
            Shape::Linear => a * z,
            Shape::PiecewiseLinear => {
                if z > 15.0 {
                    a * (z - 15.0)
                } else {
                    0.0
                }
            }
            Shape::Logarithm => a * z.ln_1p(),
            Shape::Sigmoid => a / (1.0 + 1000.0 * (-z).exp()),
        }
    }
}

/// Convenience wrapper for [`TrueRaf::eval`].
pub fn true_raf_eval(tr: &TrueRaf, z: f64) -> f64 {
    tr.eval(z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub subjects: usize,
    pub basis_size: usize,
    pub truth: TrueRaf,
    pub replicates: usize,
    pub seed: u64,
    /// Episode counts are uniform on `0..=max_episodes`.
    pub max_episodes: u32,
}

impl SimConfig {
    pub fn new(truth: TrueRaf, subjects: usize, basis_size: usize, seed: u64) -> Self {
        Self {
            subjects,
            basis_size,
            truth,
            replicates: 20,
            seed,
            max_episodes: MAX_EPISODES,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.subjects < 50 {
            return Err(SimError::Config(format!(
                "need at least 50 subjects, got {}",
                self.subjects
            )));
        }
        if self.replicates < 1 {
            return Err(SimError::Config("replicates must be at least 1".into()));
        }
        Ok(())
    }
}

fn subject_rng(seed: u64, replicate: u64, subject: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&replicate.to_le_bytes());
    key[16..24].copy_from_slice(b"flamesim");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(subject);
    rng
}

/// Names of the simulated covariates, intercept first.
pub fn covariate_names() -> Vec<String> {
    vec!["intercept".to_string(), "x1".to_string()]
}

/// Draws one replicate dataset. Episodes are laid end to end with a
/// one-minute gap, which gives them start times without affecting the model.
pub fn generate_dataset<T: Real>(cfg: &SimConfig, replicate: u64) -> Result<Dataset<T>, SimError> {
    cfg.validate()?;
    let subjects = (0..cfg.subjects)
        .map(|i| {
            let mut rng = subject_rng(cfg.seed, replicate, i as u64);
            let x1: f64 = rng.sample(StandardNormal);
            let count = rng.random_range(0..=cfg.max_episodes);
            let mut start = 0.0;
            let mut eta = TRUE_BETA[0] + TRUE_BETA[1] * x1;
            let episodes = (0..count)
                .map(|_| {
                    // (0, 30]: the open end sits at zero
                    let z = DURATION_MAX * (1.0 - rng.random::<f64>());
                    eta += cfg.truth.eval(z);
                    let e = Episode::new(T::lit(z), Some(T::lit(start)));
                    start += z + 1.0;
                    e
                })
                .collect();
            let y = rng.random::<f64>() < eta.expit();
            SubjectRecord {
                id: (i + 1).to_string(),
                y,
                x: vec![T::one(), T::lit(x1)],
                episodes,
            }
        })
        .collect();
    Ok(Dataset::new(subjects, covariate_names())?)
}

/// Trapezoid rule on `ISE_POINTS` uniform points of `[0, 30]`.
pub fn ise_of(estimate: impl Fn(f64) -> f64, truth: &TrueRaf) -> f64 {
    let n = ISE_POINTS - 1;
    let h = DURATION_MAX / n as f64;
    (0..=n)
        .map(|i| {
            let z = DURATION_MAX * i as f64 / n as f64;
            let d = estimate(z) - truth.eval(z);
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * d * d
        })
        .sum::<f64>()
        * h
}

/// Integrated squared error of the posterior-mean curve, linearly
/// interpolated between grid points.
pub fn ise(est: &RafEstimate, truth: &TrueRaf) -> Result<f64, SimError> {
    let (lo, hi) = match (est.grid.first(), est.grid.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => {
            return Err(SimError::GridSpan {
                lo: f64::NAN,
                hi: f64::NAN,
            })
        }
    };
    let tol = 1e-9 * DURATION_MAX;
    if lo > tol || hi < DURATION_MAX - tol {
        return Err(SimError::GridSpan { lo, hi });
    }
    Ok(ise_of(|z| est.interpolate_mean(z), truth))
}

/// One row of the benchmark table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub shape: Shape,
    pub event_rate: u32,
    #[serde(rename = "I")]
    pub subjects: usize,
    #[serde(rename = "K")]
    pub basis_size: usize,
    pub replicates: usize,
    pub mean_ise: f64,
    pub mc_se: f64,
    pub failures: usize,
}

/// Per-replicate outcome of a benchmark cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: u64,
    /// `None` when the fit failed.
    pub ise: Option<f64>,
    /// Posterior mean of `f(0)`; `None` when the fit failed.
    pub f0: Option<f64>,
    pub divergences: usize,
}

/// Seed handed to the sampler for a replicate, independent of the data stream.
pub fn replicate_sampler_seed(seed: u64, replicate: u64) -> u64 {
    stream_rng(seed, (1 << 32) | replicate).random()
}

/// Simulates, fits and scores one replicate.
pub fn run_replicate(
    cfg: &SimConfig,
    sampler: &SamplerConfig,
    replicate: u64,
) -> Result<ReplicateResult, SimError> {
    let ds = generate_dataset::<f64>(cfg, replicate)?;
    let spec = ModelSpec::new(cfg.basis_size, 0.0, DURATION_MAX);
    let sampler = SamplerConfig {
        seed: replicate_sampler_seed(cfg.seed, replicate),
        ..sampler.clone()
    };
    match fit(&ds, &spec, &sampler) {
        Ok(f) => {
            let curve = posterior_mean_curve(&f.draws, f.n_covariates(), &f.knots)?;
            let f0 = curve(0.0);
            Ok(ReplicateResult {
                replicate,
                ise: Some(ise_of(curve, &cfg.truth)),
                f0: Some(f0),
                divergences: f.draws.divergences(),
            })
        }
        Err(FitError::Sampler(e)) => {
            log::warn!("replicate {replicate}: sampler failed: {e}");
            Ok(ReplicateResult {
                replicate,
                ise: None,
                f0: None,
                divergences: 0,
            })
        }
        Err(FitError::Model(e)) => Err(SimError::Config(e.to_string())),
    }
}

/// Runs every replicate of one cell and reduces them in replicate order.
pub fn run_cell(
    cfg: &SimConfig,
    sampler: &SamplerConfig,
) -> Result<(BenchmarkRow, Vec<ReplicateResult>), SimError> {
    cfg.validate()?;
    sampler
        .validate()
        .map_err(|e| SimError::Config(e.to_string()))?;
    let started = Instant::now();
    let results = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(cfg, sampler, r))
        .collect::<Result<Vec<_>, _>>()?;
    let ises: Vec<f64> = results.iter().filter_map(|r| r.ise).collect();
    let n = ises.len() as f64;
    let mean = ises.iter().sum::<f64>() / n;
    let mc_se = if ises.len() > 1 {
        (ises.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    log::info!(
        "{} / {}% / I={} / K={}: mean ISE {mean:.4} over {} replicates in {:.1}s",
        cfg.truth.shape,
        cfg.truth.event_rate,
        cfg.subjects,
        cfg.basis_size,
        ises.len(),
        started.elapsed().as_secs_f64()
    );
    let row = BenchmarkRow {
        shape: cfg.truth.shape,
        event_rate: cfg.truth.event_rate.percent(),
        subjects: cfg.subjects,
        basis_size: cfg.basis_size,
        replicates: cfg.replicates,
        mean_ise: if ises.is_empty() { f64::NAN } else { mean },
        mc_se,
        failures: results.len() - ises.len(),
    };
    Ok((row, results))
}

/// Runs each cell in turn.
pub fn run_benchmark(
    cells: &[SimConfig],
    sampler: &SamplerConfig,
) -> Result<Vec<BenchmarkRow>, SimError> {
    cells
        .iter()
        .map(|c| run_cell(c, sampler).map(|(row, _)| row))
        .collect()
}
