//! Episodic-exposure data, the aggregated design, and the log posterior.
//!
//! Each subject contributes `logit p_i = x_i' beta + sum_j f(z_ij)` with
//! `f(z) = sum_k gamma_k b_k(z)`. Because `f` is linear in `gamma`, the
//! episode sum collapses into an aggregated basis row
//! `B[i, k] = sum_j b_k(z_ij)` and the predictor becomes `X beta + B gamma`.
//!
//! Priors: independent normals on `beta`; half-normal anchors on `gamma_1`
//! and `gamma_2` (plain normals when the anchor is switched off); a
//! second-order random walk on the remaining coefficients with scale `tau`;
//! half-Cauchy on `tau`. Sampling happens on an unconstrained vector where
//! the anchored coefficients and `tau` are log transformed.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reparam::{self, InnovationBasis};
use crate::sampler::LogDensity;
use crate::scalar::{log_normal_density, Real};
use crate::splines::{self, KnotLayout, KnotVector, PenaltyOperator, SplineError, MIN_BASIS_SIZE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset has no subjects")]
    Empty,
    #[error("subject {id}: expected {expected} covariates, found {found}")]
    CovariateDimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("subject {id}: covariate {index} is not finite")]
    NonFiniteCovariate { id: String, index: usize },
    #[error("subject {id}: episode {episode} has non-positive duration {duration}")]
    NonPositiveDuration {
        id: String,
        episode: usize,
        duration: f64,
    },
    #[error("duplicate subject id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model specification: {0}")]
    InvalidSpec(String),
    #[error("{what}: expected length {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("parameter constraint violated: {0}")]
    Constraint(&'static str),
    #[error("non-finite value while transforming parameter {parameter}")]
    NonFinite { parameter: usize },
    #[error("non-finite linear predictor for subject {subject}")]
    NonFiniteSubject { subject: usize },
    #[error("subject {subject}, episode {episode}: {source}")]
    EpisodeOutOfDomain {
        subject: String,
        episode: usize,
        source: SplineError,
    },
    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// One exposure episode. The start time is carried along but does not
/// enter the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode<T> {
    pub duration: T,
    pub start: Option<T>,
}

impl<T> Episode<T> {
    pub fn new(duration: T, start: Option<T>) -> Self {
        Self { duration, start }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord<T> {
    pub id: String,
    pub y: bool,
    /// Covariates; the first entry is the intercept column.
    pub x: Vec<T>,
    pub episodes: Vec<Episode<T>>,
}

impl<T: Real> SubjectRecord<T> {
    pub fn total_duration(&self) -> T {
        self.episodes.iter().map(|e| e.duration).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    subjects: Vec<SubjectRecord<T>>,
    covariate_names: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        subjects: Vec<SubjectRecord<T>>,
        covariate_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if subjects.is_empty() {
            return Err(DataError::Empty);
        }
        let p = covariate_names.len();
        let mut seen = std::collections::HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            if s.x.len() != p {
                return Err(DataError::CovariateDimension {
                    id: s.id.clone(),
                    expected: p,
                    found: s.x.len(),
                });
            }
            if let Some(index) = s.x.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteCovariate {
                    id: s.id.clone(),
                    index,
                });
            }
            for (episode, e) in s.episodes.iter().enumerate() {
                if !(e.duration > T::zero() && e.duration.is_finite()) {
                    return Err(DataError::NonPositiveDuration {
                        id: s.id.clone(),
                        episode,
                        duration: e.duration.to_f64().unwrap_or(f64::NAN),
                    });
                }
            }
        }
        let first = subjects[0].y;
        if subjects.iter().all(|s| s.y == first) {
            log::warn!(
                "all {} outcomes equal {}; the fit is degenerate",
                subjects.len(),
                first as u8
            );
        }
        Ok(Self {
            subjects,
            covariate_names,
        })
    }

    pub fn subjects(&self) -> &[SubjectRecord<T>] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn outcomes(&self) -> Vec<T> {
        self.subjects
            .iter()
            .map(|s| if s.y { T::one() } else { T::zero() })
            .collect()
    }

    pub fn max_duration(&self) -> Option<T> {
        self.subjects
            .iter()
            .flat_map(|s| s.episodes.iter().map(|e| e.duration))
            .fold(None, |acc, z| Some(acc.map_or(z, |m: T| m.max(z))))
    }
}

/// How the random-walk block is represented on the unconstrained scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// `gamma_3..gamma_K` sampled directly.
    Centered,
    /// Standardized innovations `eps_k = (D gamma)_k / tau` sampled instead.
    NonCentered,
    /// Innovations rotated into directions the data inform independently;
    /// well-informed directions centered, the rest non-centered. The
    /// rotation comes from a Laplace approximation built once per dataset.
    #[default]
    Mixed,
}

/// Prior hyperparameters and basis configuration. Missing fields take the
/// values of [`ModelSpec::default`] when deserialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    deny_unknown_fields,
    default,
    bound(deserialize = "T: Real + Deserialize<'de>")
)]
pub struct ModelSpec<T> {
    pub basis_size: usize,
    pub domain_lo: T,
    pub domain_hi: T,
    pub beta_prior_sd: T,
    pub gamma1_prior_sd: T,
    pub gamma2_prior_sd: T,
    pub tau_cauchy_scale: T,
    pub anchor_nonnegative: bool,
    pub knot_layout: KnotLayout,
    pub parameterization: Parameterization,
}

/// Default basis size and the simulation domain `[0, 30]` minutes.
impl<T: Real> Default for ModelSpec<T> {
    fn default() -> Self {
        Self::new(30, T::zero(), T::lit(30.0))
    }
}

impl<T: Real> ModelSpec<T> {
    pub fn new(basis_size: usize, domain_lo: T, domain_hi: T) -> Self {
        Self {
            basis_size,
            domain_lo,
            domain_hi,
            beta_prior_sd: T::lit(10.0),
            gamma1_prior_sd: T::lit(1e-3),
            gamma2_prior_sd: T::one(),
            tau_cauchy_scale: T::one(),
            anchor_nonnegative: true,
            knot_layout: KnotLayout::default(),
            parameterization: Parameterization::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.basis_size < MIN_BASIS_SIZE {
            return Err(ModelError::InvalidSpec(format!(
                "basis size K = {} is below the minimum of {MIN_BASIS_SIZE}",
                self.basis_size
            )));
        }
        let scales = [
            ("beta_prior_sd", self.beta_prior_sd),
            ("gamma1_prior_sd", self.gamma1_prior_sd),
            ("gamma2_prior_sd", self.gamma2_prior_sd),
            ("tau_cauchy_scale", self.tau_cauchy_scale),
        ];
        for (name, v) in scales {
            if !(v > T::zero() && v.is_finite()) {
                return Err(ModelError::InvalidSpec(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(self.domain_lo >= T::zero() && self.domain_hi > self.domain_lo) {
            return Err(ModelError::InvalidSpec(format!(
                "domain [{}, {}] must satisfy hi > lo >= 0",
                self.domain_lo, self.domain_hi
            )));
        }
        Ok(())
    }

    pub fn knots(&self) -> Result<KnotVector<T>, ModelError> {
        self.validate()?;
        Ok(splines::build_knots_with_layout(
            self.basis_size,
            self.domain_lo,
            self.domain_hi,
            self.knot_layout,
        )?)
    }
}

/// Constrained parameters `(beta, gamma, tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector<T> {
    pub beta: Vec<T>,
    pub gamma: Vec<T>,
    pub tau: T,
}

impl<T: Real> ParameterVector<T> {
    /// Splits a flat `[beta, gamma, tau]` slice.
    pub fn from_flat(flat: &[T], n_covariates: usize, basis_size: usize) -> Self {
        assert_eq!(flat.len(), n_covariates + basis_size + 1);
        Self {
            beta: flat[..n_covariates].to_vec(),
            gamma: flat[n_covariates..n_covariates + basis_size].to_vec(),
            tau: flat[n_covariates + basis_size],
        }
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.beta.len() + self.gamma.len() + 1);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.gamma);
        out.push(self.tau);
        out
    }
}

/// Column names of the flat `[beta, gamma, tau]` layout.
pub fn parameter_names(covariate_names: &[String], basis_size: usize) -> Vec<String> {
    covariate_names
        .iter()
        .map(|n| format!("beta[{n}]"))
        .chain((1..=basis_size).map(|k| format!("gamma[{k}]")))
        .chain(std::iter::once("tau".to_string()))
        .collect()
}

/// Mapping between constrained parameters and the unconstrained sampling
/// vector `[beta, g1, g2, rest..., log tau]` of length `p + K + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterLayout {
    pub n_covariates: usize,
    pub basis_size: usize,
    pub anchored: bool,
    pub parameterization: Parameterization,
    /// Present exactly when the parameterization is [`Parameterization::Mixed`].
    pub innovations: Option<Arc<InnovationBasis>>,
}

impl ParameterLayout {
    pub fn for_spec<T>(spec: &ModelSpec<T>, n_covariates: usize) -> Self {
        Self {
            n_covariates,
            basis_size: spec.basis_size,
            anchored: spec.anchor_nonnegative,
            parameterization: spec.parameterization,
            innovations: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_covariates + self.basis_size + 1
    }

    fn tau_index(&self) -> usize {
        self.n_covariates + self.basis_size
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len != self.dim() {
            return Err(ModelError::Dimension {
                what: "unconstrained vector",
                expected: self.dim(),
                found: len,
            });
        }
        Ok(())
    }

    fn exp_checked<T: Real>(u: T, parameter: usize) -> Result<T, ModelError> {
        let v = u.exp();
        if v.is_finite() && v > T::zero() {
            Ok(v)
        } else {
            Err(ModelError::NonFinite { parameter })
        }
    }

    /// Maps an unconstrained vector to `(beta, gamma, tau)`; also returns the
    /// standardized innovations when non-centered.
    pub fn constrain<T: Real>(&self, u: &[T]) -> Result<ParameterVector<T>, ModelError> {
        self.check_len(u.len())?;
        if let Some(parameter) = u.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite { parameter });
        }
        let p = self.n_covariates;
        let k = self.basis_size;
        let tau = Self::exp_checked(u[self.tau_index()], self.tau_index())?;
        let mut gamma = vec![T::zero(); k];
        for j in 0..2 {
            gamma[j] = if self.anchored {
                Self::exp_checked(u[p + j], p + j)?
            } else {
                u[p + j]
            };
        }
        match self.parameterization {
            Parameterization::Centered => gamma[2..].copy_from_slice(&u[p + 2..p + k]),
            Parameterization::NonCentered => {
                for j in 2..k {
                    gamma[j] = gamma[j - 1] + gamma[j - 1] - gamma[j - 2] + tau * u[p + j];
                }
                if let Some(j) = gamma.iter().position(|g| !g.is_finite()) {
                    return Err(ModelError::NonFinite { parameter: p + j });
                }
            }
            Parameterization::Mixed => {
                let basis = self.innovation_basis()?;
                let z: Vec<T> = (0..k - 2)
                    .map(|m| {
                        let v = u[p + 2 + m];
                        if basis.is_centered(m) {
                            v - basis.shift(m, gamma[0], gamma[1])
                        } else {
                            tau * v
                        }
                    })
                    .collect();
                let mut r = vec![T::zero(); k - 2];
                basis.map_into(&z, &mut r);
                let slope = gamma[1] - gamma[0];
                for j in 2..k {
                    gamma[j] = gamma[0] + T::from_usize_lossy(j) * slope + r[j - 2];
                }
                if let Some(j) = gamma.iter().position(|g| !g.is_finite()) {
                    return Err(ModelError::NonFinite { parameter: p + j });
                }
            }
        }
        Ok(ParameterVector {
            beta: u[..p].to_vec(),
            gamma,
            tau,
        })
    }

    pub fn unconstrain<T: Real>(&self, params: &ParameterVector<T>) -> Result<Vec<T>, ModelError> {
        self.check_params(params)?;
        let p = self.n_covariates;
        let k = self.basis_size;
        let mut u = Vec::with_capacity(self.dim());
        u.extend_from_slice(&params.beta);
        for j in 0..2 {
            u.push(if self.anchored {
                params.gamma[j].ln()
            } else {
                params.gamma[j]
            });
        }
        match self.parameterization {
            Parameterization::Centered => u.extend_from_slice(&params.gamma[2..]),
            Parameterization::NonCentered => u.extend(
                params
                    .gamma
                    .windows(3)
                    .map(|w| (w[2] - (w[1] + w[1]) + w[0]) / params.tau),
            ),
            Parameterization::Mixed => {
                let basis = self.innovation_basis()?;
                let e: Vec<T> = params
                    .gamma
                    .windows(3)
                    .map(|w| w[2] - (w[1] + w[1]) + w[0])
                    .collect();
                let mut z = vec![T::zero(); k - 2];
                basis.rotate_back_into(&e, &mut z);
                u.extend(z.iter().enumerate().map(|(m, &zm)| {
                    if basis.is_centered(m) {
                        zm + basis.shift(m, params.gamma[0], params.gamma[1])
                    } else {
                        zm / params.tau
                    }
                }));
            }
        }
        u.push(params.tau.ln());
        debug_assert_eq!(u.len(), p + k + 1);
        Ok(u)
    }

    /// `log |d(beta, gamma, tau) / du|` at `u`.
    pub fn log_jacobian<T: Real>(&self, u: &[T]) -> T {
        let p = self.n_covariates;
        let log_tau = u[self.tau_index()];
        let mut out = log_tau;
        if self.anchored {
            out += u[p] + u[p + 1];
        }
        out + T::from_usize_lossy(self.n_scaled()) * log_tau
    }

    /// Number of innovation coordinates sampled on the `tau`-standardized scale.
    pub fn n_scaled(&self) -> usize {
        let m = self.basis_size - 2;
        match self.parameterization {
            Parameterization::Centered => 0,
            Parameterization::NonCentered => m,
            Parameterization::Mixed => self.innovations.as_ref().map_or(m, |b| m - b.n_centered()),
        }
    }

    fn innovation_basis(&self) -> Result<&InnovationBasis, ModelError> {
        match &self.innovations {
            Some(b) if b.dim() + 2 == self.basis_size => Ok(b),
            _ => Err(ModelError::InvalidSpec(
                "mixed parameterization needs an innovation basis built for this posterior".into(),
            )),
        }
    }

    fn check_params<T: Real>(&self, params: &ParameterVector<T>) -> Result<(), ModelError> {
        if params.beta.len() != self.n_covariates {
            return Err(ModelError::Dimension {
                what: "beta",
                expected: self.n_covariates,
                found: params.beta.len(),
            });
        }
        if params.gamma.len() != self.basis_size {
            return Err(ModelError::Dimension {
                what: "gamma",
                expected: self.basis_size,
                found: params.gamma.len(),
            });
        }
        if !(params.tau > T::zero()) {
            return Err(ModelError::Constraint("tau must be positive"));
        }
        if self.anchored && !(params.gamma[0] > T::zero() && params.gamma[1] > T::zero()) {
            return Err(ModelError::Constraint(
                "anchored gamma_1, gamma_2 must be positive",
            ));
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>], cols: usize) -> Self {
        let mut m = Self::zeros(rows.len(), cols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), cols, "row {i} length");
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Covariate matrix `X` and aggregated basis matrix `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedDesign<T> {
    pub x: DenseMatrix<T>,
    pub b: DenseMatrix<T>,
}

impl<T: Real> AggregatedDesign<T> {
    pub fn new(x: DenseMatrix<T>, b: DenseMatrix<T>) -> Result<Self, ModelError> {
        if x.rows() != b.rows() {
            return Err(ModelError::Dimension {
                what: "design rows",
                expected: x.rows(),
                found: b.rows(),
            });
        }
        Ok(Self { x, b })
    }

    pub fn n_subjects(&self) -> usize {
        self.x.rows()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.cols()
    }

    pub fn basis_size(&self) -> usize {
        self.b.cols()
    }

    /// `eta = X beta + B gamma`.
    pub fn linear_predictor(&self, params: &ParameterVector<T>) -> Result<Vec<T>, ModelError> {
        self.check_params(params)?;
        Ok((0..self.n_subjects())
            .map(|i| dot(self.x.row(i), &params.beta) + dot(self.b.row(i), &params.gamma))
            .collect())
    }

    fn check_params(&self, params: &ParameterVector<T>) -> Result<(), ModelError> {
        if params.beta.len() != self.n_covariates() {
            return Err(ModelError::Dimension {
                what: "beta",
                expected: self.n_covariates(),
                found: params.beta.len(),
            });
        }
        if params.gamma.len() != self.basis_size() {
            return Err(ModelError::Dimension {
                what: "gamma",
                expected: self.basis_size(),
                found: params.gamma.len(),
            });
        }
        Ok(())
    }
}

/// Builds `X` and `B[i, k] = sum_j b_k(z_ij)`.
pub fn aggregate_design<T: Real>(
    ds: &Dataset<T>,
    kv: &KnotVector<T>,
) -> Result<AggregatedDesign<T>, ModelError> {
    let n = ds.n_subjects();
    let p = ds.n_covariates();
    let mut x = DenseMatrix::zeros(n, p);
    let mut b = DenseMatrix::zeros(n, kv.basis_size());
    for (i, s) in ds.subjects().iter().enumerate() {
        x.row_mut(i).copy_from_slice(&s.x);
        let row = b.row_mut(i);
        for (episode, e) in s.episodes.iter().enumerate() {
            kv.accumulate_basis(e.duration, T::one(), row)
                .map_err(|source| ModelError::EpisodeOutOfDomain {
                    subject: s.id.clone(),
                    episode,
                    source,
                })?;
        }
    }
    AggregatedDesign::new(x, b)
}

/// Bernoulli-logit log likelihood `sum_i y_i eta_i - log(1 + e^eta_i)`.
pub fn log_likelihood<T: Real>(
    params: &ParameterVector<T>,
    design: &AggregatedDesign<T>,
    y: &[T],
) -> Result<T, ModelError> {
    if y.len() != design.n_subjects() {
        return Err(ModelError::Dimension {
            what: "outcomes",
            expected: design.n_subjects(),
            found: y.len(),
        });
    }
    let eta = design.linear_predictor(params)?;
    Ok(eta
        .iter()
        .zip(y)
        .map(|(&e, &yi)| yi * e - e.softplus())
        .sum())
}

fn half_cauchy_log_density<T: Real>(tau: T, scale: T) -> T {
    let r = tau / scale;
    T::lit(2.0).ln() - T::lit(std::f64::consts::PI).ln() - scale.ln() - (T::one() + r * r).ln()
}

fn anchor_log_density<T: Real>(g: T, sd: T, anchored: bool) -> T {
    let base = log_normal_density(g, sd);
    if anchored {
        base + T::lit(2.0).ln()
    } else {
        base
    }
}

/// Log prior density of constrained parameters, normalizing constants included.
pub fn log_prior<T: Real>(
    params: &ParameterVector<T>,
    spec: &ModelSpec<T>,
    penalty: &PenaltyOperator,
) -> Result<T, ModelError> {
    if params.gamma.len() != penalty.basis_size() || params.gamma.len() != spec.basis_size {
        return Err(ModelError::Dimension {
            what: "gamma",
            expected: spec.basis_size,
            found: params.gamma.len(),
        });
    }
    if !(params.tau > T::zero()) {
        return Err(ModelError::Constraint("tau must be positive"));
    }
    let anchored = spec.anchor_nonnegative;
    if anchored && (params.gamma[0] < T::zero() || params.gamma[1] < T::zero()) {
        return Err(ModelError::Constraint(
            "anchored gamma_1, gamma_2 must be nonnegative",
        ));
    }
    let rw2: T = penalty
        .apply(&params.gamma)
        .into_iter()
        .map(|d| log_normal_density(d, params.tau))
        .sum();
    let anchors = anchor_log_density(params.gamma[0], spec.gamma1_prior_sd, anchored)
        + anchor_log_density(params.gamma[1], spec.gamma2_prior_sd, anchored);
    let beta: T = params
        .beta
        .iter()
        .map(|&b| log_normal_density(b, spec.beta_prior_sd))
        .sum();
    Ok(rw2 + anchors + half_cauchy_log_density(params.tau, spec.tau_cauchy_scale) + beta)
}

/// The full unconstrained posterior target for one dataset.
#[derive(Debug, Clone)]
pub struct FlamePosterior<T> {
    spec: ModelSpec<T>,
    layout: ParameterLayout,
    design: AggregatedDesign<T>,
    /// `[X | B]` row-major, the layout the gradient loop streams through.
    stacked: Vec<T>,
    y: Vec<T>,
    penalty: PenaltyOperator,
}

impl<T: Real> FlamePosterior<T> {
    pub fn new(
        spec: ModelSpec<T>,
        design: AggregatedDesign<T>,
        y: Vec<T>,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        if design.basis_size() != spec.basis_size {
            return Err(ModelError::Dimension {
                what: "basis columns",
                expected: spec.basis_size,
                found: design.basis_size(),
            });
        }
        if y.len() != design.n_subjects() {
            return Err(ModelError::Dimension {
                what: "outcomes",
                expected: design.n_subjects(),
                found: y.len(),
            });
        }
        let penalty = splines::difference_penalty(spec.basis_size)?;
        let stacked = (0..design.n_subjects())
            .flat_map(|i| design.x.row(i).iter().chain(design.b.row(i)).copied())
            .collect();
        let mut layout = ParameterLayout::for_spec(&spec, design.n_covariates());
        if spec.parameterization == Parameterization::Mixed {
            let basis = reparam::innovation_basis(&design, &y, &spec, 1.0)?;
            layout.innovations = Some(Arc::new(basis));
        }
        Ok(Self {
            spec,
            layout,
            design,
            y,
            stacked,
            penalty,
        })
    }

    pub fn from_dataset(spec: ModelSpec<T>, ds: &Dataset<T>) -> Result<Self, ModelError> {
        let kv = spec.knots()?;
        let design = aggregate_design(ds, &kv)?;
        Self::new(spec, design, ds.outcomes())
    }

    pub fn spec(&self) -> &ModelSpec<T> {
        &self.spec
    }

    pub fn layout(&self) -> &ParameterLayout {
        &self.layout
    }

    pub fn design(&self) -> &AggregatedDesign<T> {
        &self.design
    }

    pub fn outcomes(&self) -> &[T] {
        &self.y
    }

    pub fn penalty(&self) -> &PenaltyOperator {
        &self.penalty
    }

    /// Value-only route: constrain, then likelihood + prior + log Jacobian.
    pub fn log_posterior_unconstrained(&self, u: &[T]) -> Result<T, ModelError> {
        let params = self.layout.constrain(u)?;
        let value = log_likelihood(&params, &self.design, &self.y)?
            + log_prior(&params, &self.spec, &self.penalty)?
            + self.layout.log_jacobian(u);
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ModelError::NonFinite {
                parameter: self.layout.dim(),
            })
        }
    }

    pub fn grad_log_posterior_unconstrained(&self, u: &[T]) -> Result<Vec<T>, ModelError> {
        let mut grad = vec![T::zero(); self.layout.dim()];
        self.value_and_grad(u, &mut grad)?;
        Ok(grad)
    }

    /// Fused value and analytic gradient of the unconstrained log posterior.
    pub fn value_and_grad(&self, u: &[T], grad: &mut [T]) -> Result<T, ModelError> {
        let layout = &self.layout;
        layout.check_len(u.len())?;
        if grad.len() != layout.dim() {
            return Err(ModelError::Dimension {
                what: "gradient buffer",
                expected: layout.dim(),
                found: grad.len(),
            });
        }
        let params = layout.constrain(u)?;
        let p = layout.n_covariates;
        let k = layout.basis_size;
        let spec = &self.spec;
        let tau = params.tau;

        // likelihood
        let mut value = T::zero();
        let mut theta = Vec::with_capacity(p + k);
        theta.extend_from_slice(&params.beta);
        theta.extend_from_slice(&params.gamma);
        let mut g_theta = vec![T::zero(); p + k];
        for (i, (row, &yi)) in self.stacked.chunks_exact(p + k).zip(&self.y).enumerate() {
            let eta = dot(row, &theta);
            if !eta.is_finite() {
                return Err(ModelError::NonFiniteSubject { subject: i });
            }
            // softplus and expit share one exponential
            let e = (-eta.abs()).exp();
            value += yi * eta - (eta.max(T::zero()) + e.ln_1p());
            let prob = if eta >= T::zero() {
                T::one() / (T::one() + e)
            } else {
                e / (T::one() + e)
            };
            let r = yi - prob;
            for (g, &x) in g_theta.iter_mut().zip(row) {
                *g += r * x;
            }
        }
        grad.iter_mut().for_each(|g| *g = T::zero());
        grad[..p].copy_from_slice(&g_theta[..p]);
        let mut g_gamma = g_theta.split_off(p);

        // fixed effects
        let var_beta = spec.beta_prior_sd * spec.beta_prior_sd;
        for (g, &b) in grad[..p].iter_mut().zip(&params.beta) {
            value += log_normal_density(b, spec.beta_prior_sd);
            *g -= b / var_beta;
        }

        // anchors on gamma_1, gamma_2
        let anchored = layout.anchored;
        for (j, sd) in [(0, spec.gamma1_prior_sd), (1, spec.gamma2_prior_sd)] {
            let g = params.gamma[j];
            value += anchor_log_density(g, sd, anchored);
            g_gamma[j] -= g / (sd * sd);
        }

        // smoothing scale
        let s = spec.tau_cauchy_scale;
        value += half_cauchy_log_density(tau, s);
        let mut g_tau = -(tau + tau) / (s * s + tau * tau);

        match layout.parameterization {
            Parameterization::Centered => {
                let d = self.penalty.apply(&params.gamma);
                let var_tau = tau * tau;
                let mut scaled = Vec::with_capacity(d.len());
                for &dk in &d {
                    value += log_normal_density(dk, tau);
                    g_tau += dk * dk / (var_tau * tau) - T::one() / tau;
                    scaled.push(-dk / var_tau);
                }
                self.penalty.accumulate_transpose(&scaled, &mut g_gamma);
                grad[p + 2..p + k].copy_from_slice(&g_gamma[2..]);
            }
            Parameterization::NonCentered => {
                // innovations are standard normal; back-propagate the gamma
                // adjoint through gamma_j = 2 gamma_{j-1} - gamma_{j-2} + tau eps
                for j in 2..k {
                    let eps = u[p + j];
                    value += log_normal_density(eps, T::one());
                    grad[p + j] = -eps;
                }
                for j in (2..k).rev() {
                    let a = g_gamma[j];
                    g_gamma[j - 1] += a + a;
                    g_gamma[j - 2] -= a;
                    grad[p + j] += tau * a;
                    g_tau += u[p + j] * a;
                }
            }
            Parameterization::Mixed => {
                let basis = layout.innovation_basis()?;
                let m = k - 2;
                let var_tau = tau * tau;
                let mut g_z = vec![T::zero(); m];
                basis.map_transpose_into(&g_gamma[2..], &mut g_z);
                let (mut s1, mut s2) = (T::zero(), T::zero());
                for (idx, &gz) in g_z.iter().enumerate() {
                    let v = u[p + 2 + idx];
                    if basis.is_centered(idx) {
                        let z = v - basis.shift(idx, params.gamma[0], params.gamma[1]);
                        value += log_normal_density(z, tau);
                        g_tau += z * z / (var_tau * tau) - T::one() / tau;
                        let h = gz - z / var_tau;
                        grad[p + 2 + idx] = h;
                        let (c1, c2) = basis.shift_coefficients(idx);
                        s1 += T::lit(c1) * h;
                        s2 += T::lit(c2) * h;
                    } else {
                        value += log_normal_density(v, T::one());
                        g_tau += v * gz;
                        grad[p + 2 + idx] = tau * gz - v;
                    }
                }
                // gamma_j = gamma_1 + (j - 1)(gamma_2 - gamma_1) + r_j
                let (mut g1, mut g2) = (T::zero(), T::zero());
                for (j, &g) in g_gamma.iter().enumerate() {
                    let jj = T::from_usize_lossy(j);
                    g1 += (T::one() - jj) * g;
                    g2 += jj * g;
                }
                g_gamma[0] = g1 - s1;
                g_gamma[1] = g2 - s2;
            }
        }

        for j in 0..2 {
            grad[p + j] = if anchored {
                g_gamma[j] * params.gamma[j] + T::one()
            } else {
                g_gamma[j]
            };
        }
        grad[layout.tau_index()] = g_tau * tau + T::one();
        // standardized innovations already carry their standard-normal
        // density, so their log tau Jacobian is implicit here
        value += layout.log_jacobian(u);
        value -= T::from_usize_lossy(layout.n_scaled()) * u[layout.tau_index()];

        if let Some(parameter) = grad.iter().position(|g| !g.is_finite()) {
            return Err(ModelError::NonFinite { parameter });
        }
        if !value.is_finite() {
            return Err(ModelError::NonFinite {
                parameter: layout.dim(),
            });
        }
        Ok(value)
    }
}

impl<T: Real> LogDensity<T> for FlamePosterior<T> {
    type Error = ModelError;

    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_and_grad(&self, position: &[T], grad: &mut [T]) -> Result<T, ModelError> {
        self.value_and_grad(position, grad)
    }
}
