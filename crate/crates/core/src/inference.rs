//! Posterior summaries: RAF curves with credible bands, scenario
//! probabilities and their contrasts, and leave-one-out ELPD.
//!
//! Every function here reads constrained draws laid out as
//! `[beta (p), gamma (K), tau]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AggregatedDesign;
use crate::sampler::diagnostics::quantile_sorted;
use crate::sampler::PosteriorDraws;
use crate::scalar::Real;
use crate::splines::{KnotVector, SplineError};

/// Fewest draws [`loo_elpd`] accepts.
pub const MIN_LOO_DRAWS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("no posterior draws")]
    EmptyDraws,
    #[error("grid step must be positive and finite, got {0}")]
    GridStep(f64),
    #[error("credible level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("draws have {found} columns, expected {expected} for p = {p}, K = {k}")]
    Layout {
        found: usize,
        expected: usize,
        p: usize,
        k: usize,
    },
    #[error("scenario '{label}': covariate profile has {found} entries, expected {expected}")]
    Profile {
        label: String,
        expected: usize,
        found: usize,
    },
    #[error("scenario '{label}', episode {episode}: {source}")]
    Episode {
        label: String,
        episode: usize,
        source: SplineError,
    },
    #[error("leave-one-out needs at least {MIN_LOO_DRAWS} draws, got {0}")]
    TooFewDraws(usize),
    #[error("design has {design} subjects but {outcomes} outcomes")]
    Outcomes { design: usize, outcomes: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

fn check_layout<T: Real>(
    draws: &PosteriorDraws<T>,
    p: usize,
    kv: &KnotVector<T>,
) -> Result<(), InferenceError> {
    let k = kv.basis_size();
    if draws.dim() != p + k + 1 {
        return Err(InferenceError::Layout {
            found: draws.dim(),
            expected: p + k + 1,
            p,
            k,
        });
    }
    if draws.total_draws() == 0 {
        return Err(InferenceError::EmptyDraws);
    }
    Ok(())
}

/// Mean and equal-tailed credible interval of a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Summary {
    /// Summarizes `values` at credible `level` (0.95 gives 2.5% / 97.5%).
    pub fn of(values: &[f64], level: f64) -> Result<Self, InferenceError> {
        if values.is_empty() {
            return Err(InferenceError::EmptyDraws);
        }
        if !(level > 0.0 && level < 1.0) {
            return Err(InferenceError::Level(level));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let tail = (1.0 - level) / 2.0;
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            lower: quantile_sorted(&sorted, tail),
            upper: quantile_sorted(&sorted, 1.0 - tail),
        })
    }
}

/// Pointwise posterior summary of `f` on a duration grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RafEstimate {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl RafEstimate {
    /// Posterior mean at `z`, linear between grid points and flat beyond them.
    pub fn interpolate_mean(&self, z: f64) -> f64 {
        let g = &self.grid;
        let i = g.partition_point(|&t| t <= z);
        if i == 0 {
            return self.mean[0];
        }
        if i == g.len() {
            return self.mean[g.len() - 1];
        }
        let w = (z - g[i - 1]) / (g[i] - g[i - 1]);
        self.mean[i - 1] + w * (self.mean[i] - self.mean[i - 1])
    }

    /// CSV with header `duration,mean,lower,upper`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("duration,mean,lower,upper\n");
        for i in 0..self.grid.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.grid[i], self.mean[i], self.lower[i], self.upper[i]
            ));
        }
        out
    }
}

/// `lo, lo + step, ...` up to and including `hi`.
pub fn duration_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>, InferenceError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(InferenceError::GridStep(step));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| (lo + i as f64 * step).min(hi)).collect();
    if hi - grid[n] > 1e-9 * step {
        grid.push(hi);
    }
    Ok(grid)
}

/// 95% pointwise band of `f` on the grid `domain_lo..=domain_hi` by `grid_step`.
pub fn raf_curve<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    grid_step: f64,
) -> Result<RafEstimate, InferenceError> {
    raf_curve_with_level(draws, n_covariates, kv, grid_step, 0.95)
}

pub fn raf_curve_with_level<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    grid_step: f64,
    level: f64,
) -> Result<RafEstimate, InferenceError> {
    check_layout(draws, n_covariates, kv)?;
    let (lo, hi) = kv.domain();
    let grid = duration_grid(lo.to_f64_lossy(), hi.to_f64_lossy(), grid_step)?;
    let k = kv.basis_size();
    let gammas: Vec<&[T]> = draws
        .iter()
        .map(|d| &d[n_covariates..n_covariates + k])
        .collect();
    let mut est = RafEstimate {
        grid: Vec::with_capacity(grid.len()),
        mean: Vec::with_capacity(grid.len()),
        lower: Vec::with_capacity(grid.len()),
        upper: Vec::with_capacity(grid.len()),
    };
    let mut values = vec![0.0; gammas.len()];
    for &z in &grid {
        let (first, b) = kv.eval_local(T::lit(z))?;
        for (v, g) in values.iter_mut().zip(&gammas) {
            *v = b
                .iter()
                .zip(&g[first..])
                .map(|(&bi, &gi)| bi * gi)
                .sum::<T>()
                .to_f64_lossy();
        }
        let s = Summary::of(&values, level)?;
        est.grid.push(z);
        est.mean.push(s.mean);
        est.lower.push(s.lower);
        est.upper.push(s.upper);
    }
    Ok(est)
}

/// The posterior-mean curve `z -> sum_k E[gamma_k] b_k(z)`, which equals the
/// pointwise mean of `f(z)` because `f` is linear in `gamma`.
pub fn posterior_mean_curve<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
) -> Result<impl Fn(f64) -> f64, InferenceError> {
    check_layout(draws, n_covariates, kv)?;
    let k = kv.basis_size();
    let mut mean = vec![0.0; k];
    for d in draws.iter() {
        for (m, g) in mean.iter_mut().zip(&d[n_covariates..n_covariates + k]) {
            *m += g.to_f64_lossy();
        }
    }
    let n = draws.total_draws() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let (lo, hi) = kv.domain();
    let kv = crate::splines::build_knots_with_layout(
        k,
        lo.to_f64_lossy(),
        hi.to_f64_lossy(),
        kv.layout(),
    )?;
    Ok(move |z: f64| kv.eval_function(&mean, z).unwrap_or(f64::NAN))
}

/// An episode pattern at a fixed covariate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    #[serde(default)]
    pub episode_durations: Vec<f64>,
    pub covariate_profile: Vec<f64>,
}

impl Scenario {
    /// `(x, sum_j b(z_j))`, the scenario's row of the aggregated design.
    fn design_row<T: Real>(
        &self,
        p: usize,
        kv: &KnotVector<T>,
    ) -> Result<(Vec<T>, Vec<T>), InferenceError> {
        if self.covariate_profile.len() != p {
            return Err(InferenceError::Profile {
                label: self.label.clone(),
                expected: p,
                found: self.covariate_profile.len(),
            });
        }
        let mut b = vec![T::zero(); kv.basis_size()];
        for (episode, &z) in self.episode_durations.iter().enumerate() {
            kv.accumulate_basis(T::lit(z), T::one(), &mut b)
                .map_err(|source| InferenceError::Episode {
                    label: self.label.clone(),
                    episode,
                    source,
                })?;
        }
        Ok((
            self.covariate_profile.iter().map(|&v| T::lit(v)).collect(),
            b,
        ))
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Linear predictor `x' beta + sum_j f(z_j)` for every draw, chain by chain.
pub fn scenario_predictor<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    sc: &Scenario,
) -> Result<Vec<f64>, InferenceError> {
    check_layout(draws, n_covariates, kv)?;
    let p = n_covariates;
    let k = kv.basis_size();
    let (x, b) = sc.design_row(p, kv)?;
    Ok(draws
        .iter()
        .map(|d| (dot(&x, &d[..p]) + dot(&b, &d[p..p + k])).to_f64_lossy())
        .collect())
}

/// Outcome probability for every draw.
pub fn scenario_draws<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    sc: &Scenario,
) -> Result<Vec<f64>, InferenceError> {
    Ok(scenario_predictor(draws, n_covariates, kv, sc)?
        .into_iter()
        .map(|eta| eta.expit())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub label: String,
    #[serde(flatten)]
    pub probability: Summary,
}

pub fn scenario_probability<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    sc: &Scenario,
) -> Result<ScenarioSummary, InferenceError> {
    let probs = scenario_draws(draws, n_covariates, kv, sc)?;
    Ok(ScenarioSummary {
        label: sc.label.clone(),
        probability: Summary::of(&probs, 0.95)?,
    })
}

/// Summary of `P(second) - P(first)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceSummary {
    pub first: String,
    pub second: String,
    #[serde(flatten)]
    pub difference: Summary,
    /// Posterior probability that the difference is positive.
    pub prob_positive: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastResult {
    pub scenarios: Vec<ScenarioSummary>,
    pub differences: Vec<DifferenceSummary>,
}

/// Per-draw `P(b) - P(a)`.
pub fn contrast_draws<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    a: &Scenario,
    b: &Scenario,
) -> Result<Vec<f64>, InferenceError> {
    let pa = scenario_draws(draws, n_covariates, kv, a)?;
    let pb = scenario_draws(draws, n_covariates, kv, b)?;
    Ok(pb.iter().zip(&pa).map(|(y, x)| y - x).collect())
}

fn difference_summary(
    first: &str,
    second: &str,
    diff: &[f64],
) -> Result<DifferenceSummary, InferenceError> {
    Ok(DifferenceSummary {
        first: first.to_string(),
        second: second.to_string(),
        difference: Summary::of(diff, 0.95)?,
        prob_positive: diff.iter().filter(|&&d| d > 0.0).count() as f64 / diff.len() as f64,
    })
}

pub fn scenario_contrast<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    a: &Scenario,
    b: &Scenario,
) -> Result<ContrastResult, InferenceError> {
    contrast_all(draws, n_covariates, kv, &[a.clone(), b.clone()], &[(0, 1)])
}

/// Summaries for every scenario plus `P(j) - P(i)` for each pair `(i, j)`.
pub fn contrast_all<T: Real>(
    draws: &PosteriorDraws<T>,
    n_covariates: usize,
    kv: &KnotVector<T>,
    scenarios: &[Scenario],
    pairs: &[(usize, usize)],
) -> Result<ContrastResult, InferenceError> {
    let probs = scenarios
        .iter()
        .map(|sc| scenario_draws(draws, n_covariates, kv, sc))
        .collect::<Result<Vec<_>, _>>()?;
    let summaries = scenarios
        .iter()
        .zip(&probs)
        .map(|(sc, p)| {
            Ok(ScenarioSummary {
                label: sc.label.clone(),
                probability: Summary::of(p, 0.95)?,
            })
        })
        .collect::<Result<Vec<_>, InferenceError>>()?;
    let differences = pairs
        .iter()
        .map(|&(i, j)| {
            let diff: Vec<f64> = probs[j].iter().zip(&probs[i]).map(|(y, x)| y - x).collect();
            difference_summary(&scenarios[i].label, &scenarios[j].label, &diff)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ContrastResult {
        scenarios: summaries,
        differences,
    })
}

/// Leave-one-out expected log predictive density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd: f64,
    pub se: f64,
    pub pointwise: Vec<f64>,
}

/// Pointwise log likelihood, `draws x subjects`, row-major.
pub fn pointwise_log_likelihood<T: Real>(
    draws: &PosteriorDraws<T>,
    design: &AggregatedDesign<T>,
    y: &[T],
) -> Result<Vec<Vec<f64>>, InferenceError> {
    let p = design.n_covariates();
    let k = design.basis_size();
    if draws.dim() != p + k + 1 {
        return Err(InferenceError::Layout {
            found: draws.dim(),
            expected: p + k + 1,
            p,
            k,
        });
    }
    if y.len() != design.n_subjects() {
        return Err(InferenceError::Outcomes {
            design: design.n_subjects(),
            outcomes: y.len(),
        });
    }
    Ok(draws
        .iter()
        .map(|d| {
            (0..design.n_subjects())
                .map(|i| {
                    let eta = dot(design.x.row(i), &d[..p]) + dot(design.b.row(i), &d[p..p + k]);
                    (y[i] * eta - eta.softplus()).to_f64_lossy()
                })
                .collect()
        })
        .collect())
}

/// Truncated importance-sampling LOO. Raw weights `1 / p(y_i | theta_s)` are
/// capped at `mean * sqrt(S)` before self-normalizing.
pub fn loo_elpd<T: Real>(
    draws: &PosteriorDraws<T>,
    design: &AggregatedDesign<T>,
    y: &[T],
) -> Result<LooResult, InferenceError> {
    let s = draws.total_draws();
    if s < MIN_LOO_DRAWS {
        return Err(InferenceError::TooFewDraws(s));
    }
    let ll = pointwise_log_likelihood(draws, design, y)?;
    Ok(loo_from_log_likelihood(&ll))
}

/// Same as [`loo_elpd`] on a precomputed `draws x subjects` matrix.
pub fn loo_from_log_likelihood(ll: &[Vec<f64>]) -> LooResult {
    let s = ll.len();
    let n = ll.first().map_or(0, Vec::len);
    let cap = (s as f64).sqrt();
    let pointwise: Vec<f64> = (0..n)
        .map(|i| {
            let max_log_ratio = ll
                .iter()
                .map(|row| -row[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let raw: Vec<f64> = ll
                .iter()
                .map(|row| (-row[i] - max_log_ratio).exp())
                .collect();
            let mean_w = raw.iter().sum::<f64>() / s as f64;
            let w: Vec<f64> = raw.iter().map(|&r| r.min(mean_w * cap)).collect();
            // sum_s w p / sum_s w, with p = exp(ll) scaled by the same max
            let num: f64 = w.iter().zip(ll).map(|(&wi, row)| wi * row[i].exp()).sum();
            let den: f64 = w.iter().sum();
            (num / den).ln()
        })
        .collect();
    let elpd = pointwise.iter().sum::<f64>();
    let mean = elpd / n as f64;
    let var = pointwise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    LooResult {
        elpd,
        se: (n as f64 * var).sqrt(),
        pointwise,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{AdaptationSummary, ChainDraws, TransitionStats};
    use crate::splines::build_knots;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn draws_from_rows(rows: Vec<Vec<f64>>, chains: usize) -> PosteriorDraws<f64> {
        let dim = rows[0].len();
        let per = rows.len() / chains;
        let chains = rows
            .chunks(per)
            .map(|c| ChainDraws {
                values: c.concat(),
                stats: vec![TransitionStats::default(); c.len()],
                adaptation: AdaptationSummary {
                    step_size: 1.0,
                    inv_mass: vec![1.0; dim],
                    inv_mass_dense: None,
                },
            })
            .collect();
        PosteriorDraws::new((0..dim).map(|j| format!("c{j}")).collect(), chains)
    }

    fn random_rows(seed: u64, n: usize, p: usize, k: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut row: Vec<f64> = (0..p + k).map(|_| rng.random::<f64>() - 0.5).collect();
                row.push(1.0);
                row
            })
            .collect()
    }

    #[test]
    fn zero_function_curve() {
        let kv = build_knots(8, 0.0, 30.0).unwrap();
        let draws = draws_from_rows(vec![vec![0.0; 2 + 8 + 1]], 1);
        let est = raf_curve(&draws, 2, &kv, 0.1).unwrap();
        assert_eq!(est.grid.len(), 301);
        assert_eq!(*est.grid.last().unwrap(), 30.0);
        for i in 0..est.grid.len() {
            assert_eq!((est.mean[i], est.lower[i], est.upper[i]), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn greville_linear_curve() {
        let kv = build_knots(12, 0.0, 30.0).unwrap();
        let c = 0.021;
        let mut row = vec![0.3];
        row.extend(kv.greville().iter().map(|m| c * m));
        row.push(0.5);
        let draws = draws_from_rows(vec![row.clone(), row], 2);
        let est = raf_curve(&draws, 1, &kv, 0.25).unwrap();
        for (z, m) in est.grid.iter().zip(&est.mean) {
            assert!((m - c * z).abs() <= 1e-8);
        }
    }

    #[test]
    fn curve_rejects_bad_input() {
        let kv = build_knots(8, 0.0, 30.0).unwrap();
        let draws = draws_from_rows(vec![vec![0.0; 11]], 1);
        assert_eq!(
            raf_curve(&draws, 2, &kv, 0.0),
            Err(InferenceError::GridStep(0.0))
        );
        assert!(matches!(
            raf_curve(&draws, 3, &kv, 0.1),
            Err(InferenceError::Layout { .. })
        ));
        let empty = PosteriorDraws::<f64>::new((0..11).map(|j| j.to_string()).collect(), vec![]);
        assert_eq!(
            raf_curve(&empty, 2, &kv, 0.1),
            Err(InferenceError::EmptyDraws)
        );
    }

    #[test]
    fn grid_endpoints() {
        assert_eq!(
            duration_grid(0.0, 1.0, 0.25).unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        assert_eq!(
            duration_grid(0.0, 1.0, 0.4).unwrap(),
            vec![0.0, 0.4, 0.8, 1.0]
        );
        assert_eq!(duration_grid(0.0, 30.0, 0.01).unwrap().len(), 3001);
    }

    #[test]
    fn mean_curve_matches_pointwise_mean() {
        let kv = build_knots(10, 0.0, 30.0).unwrap();
        let draws = draws_from_rows(random_rows(1, 40, 2, 10), 2);
        let est = raf_curve(&draws, 2, &kv, 0.5).unwrap();
        let f = posterior_mean_curve(&draws, 2, &kv).unwrap();
        for (z, m) in est.grid.iter().zip(&est.mean) {
            assert!((f(*z) - m).abs() < 1e-12);
        }
    }

    #[test]
    fn bands_are_ordered_and_nested() {
        let kv = build_knots(10, 0.0, 30.0).unwrap();
        let draws = draws_from_rows(random_rows(2, 400, 2, 10), 4);
        let wide = raf_curve_with_level(&draws, 2, &kv, 1.0, 0.95).unwrap();
        let narrow = raf_curve_with_level(&draws, 2, &kv, 1.0, 0.8).unwrap();
        for i in 0..wide.grid.len() {
            assert!(wide.lower[i] <= wide.mean[i] && wide.mean[i] <= wide.upper[i]);
            assert!(wide.lower[i] <= narrow.lower[i] && narrow.upper[i] <= wide.upper[i]);
        }
    }

    fn scenario(label: &str, durations: Vec<f64>, profile: Vec<f64>) -> Scenario {
        Scenario {
            label: label.into(),
            episode_durations: durations,
            covariate_profile: profile,
        }
    }

    #[test]
    fn empty_scenario_with_zero_beta_is_one_half() {
        let kv = build_knots(8, 0.0, 30.0).unwrap();
        let mut rows = random_rows(3, 20, 2, 8);
        rows.iter_mut().for_each(|r| r[..2].fill(0.0));
        let draws = draws_from_rows(rows, 2);
        let s =
            scenario_probability(&draws, 2, &kv, &scenario("A", vec![], vec![1.0, 0.4])).unwrap();
        assert_eq!(
            (s.probability.mean, s.probability.lower, s.probability.upper),
            (0.5, 0.5, 0.5)
        );
    }

    #[test]
    fn sixty_short_episodes_add_sixty_f_of_one() {
        let kv = build_knots(10, 0.0, 75.0).unwrap();
        let draws = draws_from_rows(random_rows(4, 30, 1, 10), 1);
        let base = scenario_predictor(&draws, 1, &kv, &scenario("0", vec![], vec![1.0])).unwrap();
        let many = scenario_predictor(&draws, 1, &kv, &scenario("60x1", vec![1.0; 60], vec![1.0]))
            .unwrap();
        for ((d, b), m) in draws.iter().zip(&base).zip(&many) {
            let f1 = kv.eval_function(&d[1..11], 1.0).unwrap();
            assert!((m - b - 60.0 * f1).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_is_additive_over_episode_sets() {
        let kv = build_knots(10, 0.0, 75.0).unwrap();
        let draws = draws_from_rows(random_rows(5, 30, 2, 10), 3);
        let x = vec![1.0, -0.7];
        let e1 = vec![3.0, 17.5, 63.0];
        let e2 = vec![0.5, 75.0];
        let both: Vec<f64> = e1.iter().chain(&e2).copied().collect();
        let base = scenario_predictor(&draws, 2, &kv, &scenario("0", vec![], x.clone())).unwrap();
        let p1 = scenario_predictor(&draws, 2, &kv, &scenario("1", e1, x.clone())).unwrap();
        let p2 = scenario_predictor(&draws, 2, &kv, &scenario("2", e2, x.clone())).unwrap();
        let p12 = scenario_predictor(&draws, 2, &kv, &scenario("12", both, x)).unwrap();
        for i in 0..base.len() {
            assert!((p12[i] - (p1[i] + p2[i] - base[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn contrasts_are_antisymmetric_and_zero_on_identity() {
        let kv = build_knots(10, 0.0, 75.0).unwrap();
        let draws = draws_from_rows(random_rows(6, 200, 2, 10), 2);
        let a = scenario("one long", vec![60.0], vec![1.0, 0.0]);
        let b = scenario("many short", vec![1.0; 60], vec![1.0, 0.0]);
        let ab = contrast_draws(&draws, 2, &kv, &a, &b).unwrap();
        let ba = contrast_draws(&draws, 2, &kv, &b, &a).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| *x == -*y));
        let same = scenario_contrast(&draws, 2, &kv, &a, &a).unwrap();
        let d = same.differences[0].difference;
        assert_eq!((d.mean, d.lower, d.upper), (0.0, 0.0, 0.0));
        let r = scenario_contrast(&draws, 2, &kv, &a, &b).unwrap();
        assert_eq!(r.scenarios.len(), 2);
        for s in &r.scenarios {
            assert!(s.probability.lower >= 0.0 && s.probability.upper <= 1.0);
        }
        assert!(
            r.differences[0].difference.lower >= -1.0 && r.differences[0].difference.upper <= 1.0
        );
    }

    #[test]
    fn scenario_validation() {
        let kv = build_knots(10, 0.0, 30.0).unwrap();
        let draws = draws_from_rows(random_rows(7, 10, 2, 10), 1);
        assert!(matches!(
            scenario_probability(&draws, 2, &kv, &scenario("x", vec![], vec![1.0])),
            Err(InferenceError::Profile { .. })
        ));
        assert!(matches!(
            scenario_probability(
                &draws,
                2,
                &kv,
                &scenario("x", vec![5.0, 31.0], vec![1.0, 0.0])
            ),
            Err(InferenceError::Episode { episode: 1, .. })
        ));
    }

    #[test]
    fn loo_with_identical_draws_is_plug_in() {
        let ll_row = vec![-0.3, -1.2, -0.05, -2.0];
        let ll = vec![ll_row.clone(); 150];
        let r = loo_from_log_likelihood(&ll);
        assert!((r.elpd - ll_row.iter().sum::<f64>()).abs() < 1e-12);
        for (a, b) in r.pointwise.iter().zip(&ll_row) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loo_truncation_matches_direct_formula() {
        // one subject, three draws, computed by hand
        let ll = vec![vec![-0.1], vec![-1.0], vec![-5.0]];
        let r = loo_from_log_likelihood(&ll);
        let p: Vec<f64> = ll.iter().map(|r| r[0].exp()).collect();
        let raw: Vec<f64> = p.iter().map(|v| 1.0 / v).collect();
        let cap = raw.iter().sum::<f64>() / 3.0 * 3f64.sqrt();
        let w: Vec<f64> = raw.iter().map(|v| v.min(cap)).collect();
        let want = (w.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>()).ln();
        assert!((r.pointwise[0] - want).abs() < 1e-12);
        // the heaviest weight was truncated
        assert!(raw[2] > cap);
    }

    proptest::proptest! {
        #[test]
        fn summary_is_ordered(values in proptest::collection::vec(-1e3f64..1e3, 1..200), level in 0.05f64..0.99) {
            let s = Summary::of(&values, level).unwrap();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            proptest::prop_assert!(lo <= s.lower && s.lower <= s.upper && s.upper <= hi);
            proptest::prop_assert!(lo - 1e-9 <= s.mean && s.mean <= hi + 1e-9);
        }
    }
}
