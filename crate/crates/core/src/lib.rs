//! Flexible accumulation model for episodic exposures.
//!
//! A subject's log-odds of the outcome is `x' beta + sum_j f(z_j)`, where the
//! sum runs over the subject's exposure episodes and `f` is a risk
//! accumulation function of episode duration, represented by cubic
//! B-splines under a second-order random-walk prior. The crate covers the
//! basis ([`splines`]), the posterior ([`model`]), a NUTS sampler
//! ([`sampler`]), posterior summaries ([`inference`]), the simulation
//! study ([`sim`]) and file formats plus the CLI ([`io`], [`cli`]).
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the double-precision types used by the CLI and the file formats.

pub mod cli;
pub mod fit;
pub mod inference;
pub mod io;
pub mod model;
pub mod reparam;
pub mod sampler;
pub mod scalar;
pub mod sim;
pub mod splines;

pub use scalar::Real;

pub type KnotVector64 = splines::KnotVector<f64>;
pub type KnotVector32 = splines::KnotVector<f32>;
pub type Dataset64 = model::Dataset<f64>;
pub type SubjectRecord64 = model::SubjectRecord<f64>;
pub type ModelSpec64 = model::ModelSpec<f64>;
pub type ParameterVector64 = model::ParameterVector<f64>;
pub type FlamePosterior64 = model::FlamePosterior<f64>;
pub type PosteriorDraws64 = sampler::PosteriorDraws<f64>;
pub type Fit64 = fit::Fit<f64>;
