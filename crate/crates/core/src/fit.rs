//! Fitting: dataset + model spec + sampler config -> constrained draws.

use thiserror::Error;

use crate::model::{
    parameter_names, Dataset, FlamePosterior, ModelError, ModelSpec, ParameterVector,
};
use crate::sampler::{self, Init, PosteriorDraws, SamplerConfig, SamplerError};
use crate::scalar::Real;
use crate::splines::KnotVector;

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

/// A fitted model: the target it was fitted to and its constrained draws,
/// columns `[beta..., gamma[1..K], tau]`.
#[derive(Debug, Clone)]
pub struct Fit<T> {
    pub knots: KnotVector<T>,
    pub posterior: FlamePosterior<T>,
    pub draws: PosteriorDraws<T>,
}

impl<T: Real> Fit<T> {
    pub fn n_covariates(&self) -> usize {
        self.posterior.design().n_covariates()
    }

    pub fn params(&self) -> impl Iterator<Item = ParameterVector<T>> + '_ {
        let p = self.n_covariates();
        let k = self.knots.basis_size();
        self.draws
            .iter()
            .map(move |d| ParameterVector::from_flat(d, p, k))
    }
}

pub fn fit<T: Real>(
    ds: &Dataset<T>,
    spec: &ModelSpec<T>,
    cfg: &SamplerConfig,
) -> Result<Fit<T>, FitError> {
    let knots = spec.knots()?;
    let posterior = FlamePosterior::from_dataset(spec.clone(), ds)?;
    fit_posterior(posterior, knots, ds.covariate_names(), cfg)
}

/// Samples an already-assembled posterior.
pub fn fit_posterior<T: Real>(
    posterior: FlamePosterior<T>,
    knots: KnotVector<T>,
    covariate_names: &[String],
    cfg: &SamplerConfig,
) -> Result<Fit<T>, FitError> {
    let raw = sampler::sample(&posterior, Init::Random, cfg)?;
    let layout = posterior.layout().clone();
    let names = parameter_names(covariate_names, layout.basis_size);
    let draws = raw.map_draws(names, |u| layout.constrain(u).map(|p| p.to_flat()))?;
    Ok(Fit {
        knots,
        posterior,
        draws,
    })
}
