//! Convergence diagnostics: rank-normalized split R-hat and bulk/tail
//! effective sample size.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use super::PosteriorDraws;
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DiagnosticsError {
    #[error("convergence diagnostics need at least 2 chains, got {0}; run more chains")]
    TooFewChains(usize),
    #[error("convergence diagnostics need at least 4 draws per chain, got {0}")]
    TooFewDraws(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterDiagnostics {
    pub name: String,
    /// Max of bulk and folded rank-normalized split R-hat.
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
    /// Every draw of this parameter is identical; ESS is reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub parameters: Vec<ParameterDiagnostics>,
    pub divergences: usize,
    pub total_draws: usize,
    pub max_rhat: f64,
    pub min_ess_bulk: f64,
    pub rhat_threshold: f64,
    pub converged: bool,
    /// Parameters whose bulk ESS exceeds the draw count by more than 10%.
    pub ess_above_draws: Vec<String>,
}

impl Diagnostics {
    pub fn parameter(&self, name: &str) -> Option<&ParameterDiagnostics> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

/// Diagnostics with the default R-hat threshold of 1.01.
pub fn diagnose<T: Real>(draws: &PosteriorDraws<T>) -> Result<Diagnostics, DiagnosticsError> {
    diagnose_with_threshold(draws, 1.01)
}

pub fn diagnose_with_threshold<T: Real>(
    draws: &PosteriorDraws<T>,
    rhat_threshold: f64,
) -> Result<Diagnostics, DiagnosticsError> {
    if draws.n_chains() < 2 {
        return Err(DiagnosticsError::TooFewChains(draws.n_chains()));
    }
    let n = draws
        .chains()
        .iter()
        .map(|c| c.stats.len())
        .min()
        .unwrap_or(0);
    if n < 4 {
        return Err(DiagnosticsError::TooFewDraws(n));
    }
    let total = draws.total_draws();
    let parameters: Vec<ParameterDiagnostics> = (0..draws.dim())
        .map(|j| {
            let chains: Vec<Vec<f64>> = draws
                .column(j)
                .into_iter()
                .map(|c| c[..n].iter().map(|v| v.to_f64_lossy()).collect())
                .collect();
            parameter_diagnostics(draws.names()[j].clone(), &chains)
        })
        .collect();
    let max_rhat = parameters.iter().map(|p| p.rhat).fold(1.0_f64, f64::max);
    let min_ess_bulk = parameters
        .iter()
        .filter(|p| !p.degenerate)
        .map(|p| p.ess_bulk)
        .fold(f64::INFINITY, f64::min);
    let ess_above_draws = parameters
        .iter()
        .filter(|p| p.ess_bulk > 1.1 * total as f64)
        .map(|p| p.name.clone())
        .collect();
    Ok(Diagnostics {
        divergences: draws.divergences(),
        total_draws: total,
        max_rhat,
        min_ess_bulk: if min_ess_bulk.is_finite() {
            min_ess_bulk
        } else {
            0.0
        },
        rhat_threshold,
        converged: max_rhat < rhat_threshold,
        ess_above_draws,
        parameters,
    })
}

fn parameter_diagnostics(name: String, chains: &[Vec<f64>]) -> ParameterDiagnostics {
    let first = chains[0][0];
    if chains.iter().flatten().all(|&v| v == first) {
        return ParameterDiagnostics {
            name,
            rhat: 1.0,
            ess_bulk: 0.0,
            ess_tail: 0.0,
            degenerate: true,
        };
    }
    let split = split_chains(chains);
    let z = rank_normalize(&split);
    let median = quantile_sorted(&sorted(split.iter().flatten().copied()), 0.5);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - median).abs()).collect())
        .collect();
    let z_folded = rank_normalize(&folded);
    // sampling noise can push the ratio a hair below 1; report it as 1
    let rhat = rhat_basic(&z).max(rhat_basic(&z_folded)).max(1.0);
    let ess_bulk = ess_basic(&z);

    let pooled = sorted(split.iter().flatten().copied());
    let q05 = quantile_sorted(&pooled, 0.05);
    let q95 = quantile_sorted(&pooled, 0.95);
    let indicator = |pred: &dyn Fn(f64) -> bool| -> Vec<Vec<f64>> {
        split
            .iter()
            .map(|c| c.iter().map(|&v| if pred(v) { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let ess_tail = ess_basic(&indicator(&|v| v <= q05)).min(ess_basic(&indicator(&|v| v >= q95)));
    ParameterDiagnostics {
        name,
        rhat,
        ess_bulk,
        ess_tail,
        degenerate: false,
    }
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains[0].len();
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..].to_vec()])
        .collect()
}

fn sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Normal scores of pooled fractional ranks (ties averaged).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = idx.len() as f64;
    let std_normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && idx[end + 1].0 == idx[start].0 {
            end += 1;
        }
        let rank = (start + end) as f64 / 2.0 + 1.0;
        let z = std_normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, i) in &idx[start..=end] {
            out[c][i] = z;
        }
        start = end + 1;
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let within = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let between = n * sample_var(&means);
    let var_plus = (n - 1.0) / n * within + between / n;
    if within > 0.0 {
        (var_plus / within).sqrt()
    } else if between > 0.0 {
        f64::INFINITY
    } else {
        1.0
    }
}

fn autocov(c: &[f64], lag: usize, m: f64) -> f64 {
    let n = c.len();
    c[..n - lag]
        .iter()
        .zip(&c[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Geyer initial-monotone-sequence ESS across chains.
fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let chain_var: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocov(c, 0, mu) * n as f64 / (n as f64 - 1.0))
        .collect();
    let mean_var = mean(&chain_var);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    if !(var_plus > 0.0) {
        return 0.0;
    }
    let rho = |lag: usize| -> f64 {
        let acov = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, lag, mu))
            .sum::<f64>()
            / m as f64;
        1.0 - (mean_var - acov) / var_plus
    };
    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut t = 1;
    while t + 5 < n && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho_hat[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho_hat[t + 1] + rho_hat[t + 2] > rho_hat[t - 1] + rho_hat[t] {
            rho_hat[t + 1] = (rho_hat[t - 1] + rho_hat[t]) / 2.0;
            rho_hat[t + 2] = rho_hat[t + 1];
        }
        t += 2;
    }
    let draws = (m * n) as f64;
    let tail = if max_t + 1 < n {
        rho_hat[max_t + 1]
    } else {
        0.0
    };
    let tau = (-1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + tail).max(1.0 / draws.log10());
    draws / tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{AdaptationSummary, ChainDraws, TransitionStats};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn draws_from(chains: Vec<Vec<f64>>) -> PosteriorDraws<f64> {
        let chains = chains
            .into_iter()
            .map(|values| ChainDraws {
                stats: vec![TransitionStats::default(); values.len()],
                values,
                adaptation: AdaptationSummary {
                    step_size: 1.0,
                    inv_mass: vec![1.0],
                    inv_mass_dense: None,
                },
            })
            .collect();
        PosteriorDraws::new(vec!["theta".into()], chains)
    }

    fn iid(seed: u64, chains: usize, n: usize, shift: impl Fn(usize) -> f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|c| {
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift(c)
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn iid_chains_converge() {
        let d = diagnose(&draws_from(iid(1, 4, 1000, |_| 0.0))).unwrap();
        let p = &d.parameters[0];
        assert!(p.rhat < 1.01, "rhat {}", p.rhat);
        assert!(p.rhat >= 1.0 - 1e-8);
        // iid draws: ESS close to the draw count
        assert!(
            p.ess_bulk > 3000.0 && p.ess_bulk < 4400.0,
            "ess {}",
            p.ess_bulk
        );
        assert!(p.ess_tail > 2500.0);
        assert!(d.converged);
    }

    #[test]
    fn separated_chains_do_not_converge() {
        let d = diagnose(&draws_from(iid(2, 2, 500, |c| 10.0 * c as f64))).unwrap();
        assert!(d.parameters[0].rhat > 1.5);
        assert!(!d.converged);
    }

    #[test]
    fn constant_chain_is_flagged() {
        let d = diagnose(&draws_from(vec![vec![0.25; 100], vec![0.25; 100]])).unwrap();
        let p = &d.parameters[0];
        assert!(p.degenerate);
        assert!(!p.ess_bulk.is_nan() && !p.rhat.is_nan());
    }

    #[test]
    fn single_chain_is_rejected() {
        assert_eq!(
            diagnose(&draws_from(vec![vec![0.0, 1.0, 2.0, 3.0, 4.0]])).unwrap_err(),
            DiagnosticsError::TooFewChains(1)
        );
        assert_eq!(
            diagnose(&draws_from(vec![vec![0.0, 1.0], vec![1.0, 2.0]])).unwrap_err(),
            DiagnosticsError::TooFewDraws(2)
        );
    }

    #[test]
    fn autocorrelated_chain_has_lower_ess() {
        // AR(1) with phi = 0.9: ESS per draw about (1 - phi) / (1 + phi)
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..4000)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        x = 0.9 * x + e;
                        x
                    })
                    .collect()
            })
            .collect();
        let d = diagnose(&draws_from(chains)).unwrap();
        let ratio = d.parameters[0].ess_bulk / 16000.0;
        assert!((ratio - 0.1 / 1.9).abs() < 0.02, "ratio {ratio}");
    }
}
