//! Multi-chain dynamic Hamiltonian Monte Carlo over an unconstrained target.
//!
//! Each chain runs a No-U-Turn sampler with a diagonal metric. During warmup
//! the step size follows dual averaging towards `target_accept` and the
//! metric is re-estimated at the end of each slow window; both are frozen
//! afterwards. Chains run in parallel, each with its own counter-based RNG
//! stream derived from `(seed, chain)`, so results do not depend on the
//! thread count.

mod adapt;
pub mod diagnostics;
mod nuts;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use adapt::{CovarianceEstimator, DualAveraging, VarianceEstimator, WindowSchedule};
use nuts::{Metric, PhasePoint};

pub use diagnostics::{diagnose, Diagnostics, ParameterDiagnostics};

/// A differentiable log density on `R^dim`.
pub trait LogDensity<T>: Sync {
    type Error: std::error::Error + Send + Sync + 'static;

    fn dim(&self) -> usize;

    /// Returns `log p(position)` and writes its gradient into `grad`.
    fn logp_and_grad(&self, position: &[T], grad: &mut [T]) -> Result<T, Self::Error>;
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(
        "chain {chain}: initial point dimension {found} does not match target dimension {expected}"
    )]
    InitDimension {
        chain: usize,
        expected: usize,
        found: usize,
    },
    #[error("chain {chain}: log density is not finite at the initial point: {reason}")]
    NonFiniteInit { chain: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub target_accept: f64,
    pub max_tree_depth: u32,
    pub seed: u64,
    pub adapt: bool,
    /// Energy error above which a transition counts as divergent.
    pub divergence_threshold: f64,
    /// Unconstrained initial values are drawn uniformly from `[-r, r]`.
    pub init_radius: f64,
    /// Split R-hat above this marks the run as not converged.
    pub rhat_threshold: f64,
    pub metric: MetricKind,
}

/// Shape of the adapted inverse mass matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    Diagonal,
    /// Full covariance; absorbs linear correlations between coordinates.
    Dense,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 1000,
            samples: 2000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            adapt: true,
            divergence_threshold: 1000.0,
            init_radius: 2.0,
            rhat_threshold: 1.01,
            metric: MetricKind::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let fail = |m: &str| Err(SamplerError::Config(m.to_string()));
        if self.chains < 1 {
            return fail("chains must be at least 1");
        }
        if self.samples < 1 {
            return fail("samples must be at least 1");
        }
        if self.adapt && self.warmup < 100 {
            return fail("warmup must be at least 100 when adaptation is enabled");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return fail("target_accept must lie in (0, 1)");
        }
        if self.max_tree_depth < 1 {
            return fail("max_tree_depth must be at least 1");
        }
        if !(self.init_radius >= 0.0 && self.init_radius.is_finite()) {
            return fail("init_radius must be finite and nonnegative");
        }
        Ok(())
    }
}

/// Where chains start.
#[derive(Debug, Clone)]
pub enum Init<T> {
    /// Uniform on `[-init_radius, init_radius]^dim`, independently per chain.
    Random,
    /// Every chain starts at the same point.
    Point(Vec<T>),
    /// One point per chain.
    PerChain(Vec<Vec<T>>),
}

/// Per-transition sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TransitionStats {
    pub divergent: bool,
    pub tree_depth: u32,
    pub n_leapfrog: u32,
    pub step_size: f64,
    pub accept_stat: f64,
    pub energy: f64,
}

/// State of the adaptation at the end of warmup.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationSummary<T> {
    pub step_size: T,
    /// Diagonal of the inverse mass matrix.
    pub inv_mass: Vec<T>,
    /// The full row-major inverse mass matrix when the metric is dense.
    pub inv_mass_dense: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws<T> {
    /// `samples x dim`, row-major.
    pub values: Vec<T>,
    pub stats: Vec<TransitionStats>,
    pub adaptation: AdaptationSummary<T>,
}

/// Post-warmup draws of every chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws<T> {
    names: Vec<String>,
    chains: Vec<ChainDraws<T>>,
}

/// Fraction of divergent post-warmup transitions above which a run is
/// flagged unhealthy.
pub const MAX_DIVERGENT_FRACTION: f64 = 0.25;

impl<T: Real> PosteriorDraws<T> {
    pub fn new(names: Vec<String>, chains: Vec<ChainDraws<T>>) -> Self {
        let dim = names.len();
        for c in &chains {
            assert_eq!(c.values.len(), c.stats.len() * dim, "chain shape");
        }
        Self { names, chains }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_samples(&self) -> usize {
        self.chains.first().map_or(0, |c| c.stats.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.stats.len()).sum()
    }

    pub fn chains(&self) -> &[ChainDraws<T>] {
        &self.chains
    }

    pub fn draw(&self, chain: usize, index: usize) -> &[T] {
        let d = self.dim();
        &self.chains[chain].values[index * d..(index + 1) * d]
    }

    /// All draws, chain by chain.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> + '_ {
        let d = self.dim();
        self.chains
            .iter()
            .flat_map(move |c| c.values.chunks_exact(d))
    }

    /// Values of column `j` for each chain.
    pub fn column(&self, j: usize) -> Vec<Vec<T>> {
        self.chains
            .iter()
            .map(|c| {
                c.values
                    .chunks_exact(self.dim())
                    .map(|row| row[j])
                    .collect()
            })
            .collect()
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.divergent)
            .count()
    }

    pub fn divergent_fraction(&self) -> f64 {
        let n = self.total_draws();
        if n == 0 {
            0.0
        } else {
            self.divergences() as f64 / n as f64
        }
    }

    /// False when more than a quarter of post-warmup transitions diverged.
    pub fn healthy(&self) -> bool {
        self.divergent_fraction() <= MAX_DIVERGENT_FRACTION
    }

    /// Applies `f` to every draw, producing new columns named `names`.
    pub fn map_draws<E>(
        &self,
        names: Vec<String>,
        mut f: impl FnMut(&[T]) -> Result<Vec<T>, E>,
    ) -> Result<Self, E> {
        let chains = self
            .chains
            .iter()
            .map(|c| {
                let mut values = Vec::with_capacity(c.stats.len() * names.len());
                for row in c.values.chunks_exact(self.dim()) {
                    let mapped = f(row)?;
                    assert_eq!(mapped.len(), names.len(), "mapped draw length");
                    values.extend(mapped);
                }
                Ok(ChainDraws {
                    values,
                    stats: c.stats.clone(),
                    adaptation: c.adaptation.clone(),
                })
            })
            .collect::<Result<Vec<_>, E>>()?;
        Ok(Self { names, chains })
    }
}

/// Independent RNG stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_ATTEMPTS: usize = 100;

fn initial_point<T: Real, D: LogDensity<T>>(
    target: &D,
    init: &Init<T>,
    cfg: &SamplerConfig,
    chain: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PhasePoint<T>, SamplerError> {
    let dim = target.dim();
    let fixed =
        match init {
            Init::Random => None,
            Init::Point(q) => Some(q.clone()),
            Init::PerChain(qs) => Some(qs.get(chain).cloned().ok_or_else(|| {
                SamplerError::Config(format!("no initial point for chain {chain}"))
            })?),
        };
    if let Some(q) = fixed {
        if q.len() != dim {
            return Err(SamplerError::InitDimension {
                chain,
                expected: dim,
                found: q.len(),
            });
        }
        return match PhasePoint::at(target, q) {
            Ok(z) if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => Ok(z),
            Ok(z) => Err(SamplerError::NonFiniteInit {
                chain,
                reason: format!("log density {}", z.logp),
            }),
            Err(e) => Err(SamplerError::NonFiniteInit {
                chain,
                reason: e.to_string(),
            }),
        };
    }
    let mut reason = String::new();
    for _ in 0..INIT_ATTEMPTS {
        let q: Vec<T> = (0..dim)
            .map(|_| T::lit(cfg.init_radius * (2.0 * rng.random::<f64>() - 1.0)))
            .collect();
        match PhasePoint::at(target, q) {
            Ok(z) if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) => return Ok(z),
            Ok(z) => reason = format!("log density {}", z.logp),
            Err(e) => reason = e.to_string(),
        }
    }
    Err(SamplerError::NonFiniteInit { chain, reason })
}

fn run_chain<T: Real, D: LogDensity<T>>(
    target: &D,
    init: &Init<T>,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainDraws<T>, SamplerError> {
    let mut rng = stream_rng(cfg.seed, chain as u64);
    let dim = target.dim();
    let mut z = initial_point(target, init, cfg, chain, &mut rng)?;
    let mut metric = Metric::unit(dim);
    let max_energy = T::lit(cfg.divergence_threshold);
    let mut eps = T::one();
    if cfg.adapt {
        eps = nuts::find_reasonable_step(target, &metric, &z, eps, &mut rng);
    }
    let mut step_adapt = DualAveraging::new(cfg.target_accept, eps.to_f64_lossy());
    let mut schedule = WindowSchedule::new(cfg.warmup.max(1));
    let mut variance = VarianceEstimator::new(dim);
    let mut covariance = CovarianceEstimator::new(if cfg.metric == MetricKind::Dense {
        dim
    } else {
        0
    });

    for _ in 0..cfg.warmup {
        let (next, info) = nuts::transition(
            target,
            &metric,
            eps,
            cfg.max_tree_depth,
            max_energy,
            &z,
            &mut rng,
        );
        z = next;
        if !cfg.adapt {
            continue;
        }
        eps = T::lit(step_adapt.update(info.accept_stat));
        let (collect, closed) = schedule.step();
        if collect {
            variance.add(&z.q);
            if cfg.metric == MetricKind::Dense {
                covariance.add(&z.q);
            }
        }
        if closed {
            let diagonal = variance.regularized();
            metric = match cfg.metric {
                MetricKind::Diagonal => Metric::Diagonal(diagonal),
                MetricKind::Dense => Metric::dense(covariance.regularized(), dim).unwrap_or_else(|| {
                    log::debug!("chain {chain}: covariance estimate not positive definite, using its diagonal");
                    Metric::Diagonal(diagonal)
                }),
            };
            variance.reset();
            covariance.reset();
            eps = nuts::find_reasonable_step(target, &metric, &z, eps, &mut rng);
            step_adapt.restart(eps.to_f64_lossy());
        }
    }
    if cfg.adapt && cfg.warmup > 0 {
        eps = T::lit(step_adapt.final_step());
    }

    let mut values = Vec::with_capacity(cfg.samples * dim);
    let mut stats = Vec::with_capacity(cfg.samples);
    for _ in 0..cfg.samples {
        let (next, info) = nuts::transition(
            target,
            &metric,
            eps,
            cfg.max_tree_depth,
            max_energy,
            &z,
            &mut rng,
        );
        z = next;
        values.extend_from_slice(&z.q);
        stats.push(TransitionStats {
            divergent: info.divergent,
            tree_depth: info.tree_depth,
            n_leapfrog: info.n_leapfrog,
            step_size: eps.to_f64_lossy(),
            accept_stat: info.accept_stat,
            energy: info.energy,
        });
    }
    Ok(ChainDraws {
        values,
        stats,
        adaptation: AdaptationSummary {
            step_size: eps,
            inv_mass: metric.diagonal(),
            inv_mass_dense: metric.matrix().map(<[T]>::to_vec),
        },
    })
}

/// Runs `cfg.chains` chains and returns their post-warmup draws, columns
/// named `x[0]..x[dim-1]`.
pub fn sample<T: Real, D: LogDensity<T>>(
    target: &D,
    init: Init<T>,
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws<T>, SamplerError> {
    cfg.validate()?;
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|chain| run_chain(target, &init, cfg, chain))
        .collect::<Result<Vec<_>, _>>()?;
    let names = (0..target.dim()).map(|j| format!("x[{j}]")).collect();
    let draws = PosteriorDraws::new(names, chains);
    if !draws.healthy() {
        log::warn!(
            "{} of {} post-warmup transitions diverged",
            draws.divergences(),
            draws.total_draws()
        );
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    /// Independent Gaussian with per-coordinate scales.
    struct Gaussian {
        sd: Vec<f64>,
    }

    impl LogDensity<f64> for Gaussian {
        type Error = Infallible;
        fn dim(&self) -> usize {
            self.sd.len()
        }
        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, Infallible> {
            let mut lp = 0.0;
            for ((g, &xi), &s) in grad.iter_mut().zip(x).zip(&self.sd) {
                lp -= 0.5 * (xi / s).powi(2);
                *g = -xi / (s * s);
            }
            Ok(lp)
        }
    }

    /// Bivariate normal with unit variances and correlation `rho`.
    struct Correlated {
        rho: f64,
    }

    impl LogDensity<f64> for Correlated {
        type Error = Infallible;
        fn dim(&self) -> usize {
            2
        }
        fn logp_and_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<f64, Infallible> {
            let c = 1.0 / (1.0 - self.rho * self.rho);
            let (a, b) = (x[0], x[1]);
            grad[0] = -c * (a - self.rho * b);
            grad[1] = -c * (b - self.rho * a);
            Ok(-0.5 * c * (a * a - 2.0 * self.rho * a * b + b * b))
        }
    }

    struct Nowhere;

    impl LogDensity<f64> for Nowhere {
        type Error = Infallible;
        fn dim(&self) -> usize {
            1
        }
        fn logp_and_grad(&self, _: &[f64], grad: &mut [f64]) -> Result<f64, Infallible> {
            grad[0] = 0.0;
            Ok(f64::NEG_INFINITY)
        }
    }

    fn cfg(warmup: usize, samples: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            warmup,
            samples,
            seed,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(cfg(50, 10, 0).validate().is_err());
        assert!(SamplerConfig {
            chains: 0,
            ..SamplerConfig::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            target_accept: 1.0,
            ..SamplerConfig::default()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig {
            adapt: false,
            warmup: 0,
            ..SamplerConfig::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn standard_gaussian_moments() {
        let target = Gaussian { sd: vec![1.0; 5] };
        let draws = sample(&target, Init::Random, &cfg(500, 1000, 11)).unwrap();
        assert_eq!(draws.total_draws(), 4000);
        let diag = diagnose(&draws).unwrap();
        for j in 0..5 {
            let all: Vec<f64> = draws.column(j).concat();
            let n = all.len() as f64;
            let mean = all.iter().sum::<f64>() / n;
            let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let mcse = (var / diag.parameters[j].ess_bulk).sqrt();
            assert!(
                mean.abs() < 3.0 * mcse,
                "coordinate {j}: mean {mean} mcse {mcse}"
            );
            assert!((var - 1.0).abs() < 0.1, "coordinate {j}: var {var}");
            assert!(diag.parameters[j].rhat < 1.01);
        }
        assert_eq!(draws.divergences(), 0);
    }

    #[test]
    fn deterministic_given_seed() {
        let target = Gaussian { sd: vec![1.0, 2.0] };
        let a = sample(&target, Init::Random, &cfg(150, 100, 5)).unwrap();
        let b = sample(&target, Init::Random, &cfg(150, 100, 5)).unwrap();
        assert_eq!(a, b);
        let c = sample(&target, Init::Random, &cfg(150, 100, 6)).unwrap();
        assert_ne!(a.chains()[0].values, c.chains()[0].values);
        // distinct chains see distinct streams
        assert_ne!(a.chains()[0].values, a.chains()[1].values);
    }

    #[test]
    fn thread_count_does_not_change_draws() {
        let target = Gaussian {
            sd: vec![1.0, 0.5, 3.0],
        };
        let c = cfg(150, 50, 9);
        let one = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| sample(&target, Init::Random, &c).unwrap());
        let four = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| sample(&target, Init::Random, &c).unwrap());
        assert_eq!(one, four);
    }

    #[test]
    fn tiny_scale_adapts_step_size() {
        let target = Gaussian { sd: vec![1e-3] };
        let draws = sample(&target, Init::Point(vec![0.0]), &cfg(500, 500, 3)).unwrap();
        for chain in draws.chains() {
            // the metric absorbs the scale; the step measured in position units must shrink
            let effective = chain.adaptation.step_size * chain.adaptation.inv_mass[0].sqrt();
            assert!(effective < 1e-2, "effective step {effective}");
        }
        assert!(draws.divergent_fraction() < 0.5);
        let all = draws.column(0).concat();
        let sd = (all.iter().map(|v| v * v).sum::<f64>() / all.len() as f64).sqrt();
        assert!((sd - 1e-3).abs() < 2e-4);
    }

    #[test]
    fn correlated_gaussian_correlation() {
        let target = Correlated { rho: 0.8 };
        let draws = sample(&target, Init::Random, &cfg(1000, 2000, 21)).unwrap();
        let a = draws.column(0).concat();
        let b = draws.column(1).concat();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>();
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>();
        let vb = b.iter().map(|y| (y - mb).powi(2)).sum::<f64>();
        let r = cov / (va * vb).sqrt();
        assert!((r - 0.8).abs() < 0.05, "sample correlation {r}");
    }

    #[test]
    fn non_finite_initial_point_fails_fast() {
        let err = sample(&Nowhere, Init::Point(vec![0.0]), &cfg(100, 10, 0)).unwrap_err();
        assert!(matches!(err, SamplerError::NonFiniteInit { chain: 0, .. }));
        let err = sample(&Nowhere, Init::Random, &cfg(100, 10, 0)).unwrap_err();
        assert!(matches!(err, SamplerError::NonFiniteInit { .. }));
        let target = Gaussian { sd: vec![1.0; 3] };
        assert!(matches!(
            sample(&target, Init::Point(vec![0.0]), &cfg(100, 10, 0)),
            Err(SamplerError::InitDimension { .. })
        ));
    }
}
