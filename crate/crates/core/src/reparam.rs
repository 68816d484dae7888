//! Data-informed partial non-centering of the random-walk block.
//!
//! With many subjects the data pin down the smooth, low-frequency part of
//! the RAF while the wiggly part is left to the prior. Neither a fully
//! centered nor a fully non-centered random walk suits both at once, and
//! NUTS then needs hundreds of leapfrog steps per draw. Here a Gaussian
//! (Laplace) approximation of the posterior is used once, before sampling,
//! to rotate the standardized innovations `e = D gamma` into directions that
//! the likelihood treats independently. A direction whose likelihood
//! information `lambda` exceeds the prior precision `1 / tau^2` is sampled
//! centered, the rest non-centered.
//!
//! The rotation is orthogonal, so the prior stays `z ~ N(0, tau^2 I)` and
//! the posterior itself is unchanged; only the sampling coordinates move.
//! Centered coordinates are additionally shifted by the image of the linear
//! extrapolation from `gamma_1, gamma_2`, so they track absolute coefficient
//! values rather than deviations from a line whose slope is sampled on the
//! log scale. The shift has unit Jacobian.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::model::{AggregatedDesign, ModelError, ModelSpec};
use crate::scalar::Real;

/// Log-spaced candidates for the Laplace estimate of `tau`.
const TAU_GRID: (f64, f64, usize) = (1e-4, 10.0, 61);
const NEWTON_MAX_ITER: usize = 50;
const NEWTON_TOL: f64 = 1e-9;

/// Orthogonal rotation of the `K - 2` innovations plus the per-direction
/// centering decision.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationBasis {
    dim: usize,
    /// `r = L Q z`, row-major, where `r_j = gamma_{j+2}` minus the linear
    /// extrapolation of `gamma_1, gamma_2`.
    map: Vec<f64>,
    /// `Q`, row-major: `e = Q z`.
    rotation: Vec<f64>,
    centered: Vec<bool>,
    /// `Q' L^-1` applied to the extrapolation coefficients of `gamma_1` and
    /// `gamma_2`; centered coordinates are stored with this shift added.
    shift: [Vec<f64>; 2],
    information: Vec<f64>,
    tau_hat: f64,
}

impl InnovationBasis {
    /// The identity rotation with every direction non-centered; reproduces
    /// the plain non-centered random walk.
    pub fn identity(dim: usize) -> Self {
        let eye = DMatrix::<f64>::identity(dim, dim);
        Self::from_rotation(eye, vec![0.0; dim], f64::NAN, 0.0)
    }

    fn from_rotation(q: DMatrix<f64>, information: Vec<f64>, tau_hat: f64, threshold: f64) -> Self {
        let dim = q.nrows();
        let l = double_cumsum(dim);
        let map = &l * &q;
        // r_j deviates from gamma_1 + (j - 1)(gamma_2 - gamma_1), j = 3..K
        let extrapolation = |c: fn(f64) -> f64| {
            let a = DVector::from_fn(dim, |j, _| c((j + 2) as f64));
            let solved = l.solve_lower_triangular(&a).expect("unit lower triangular");
            (q.transpose() * solved).as_slice().to_vec()
        };
        let shift = [extrapolation(|j| 1.0 - j), extrapolation(|j| j)];
        let centered = information
            .iter()
            .map(|&l| tau_hat.is_finite() && tau_hat * tau_hat * l > threshold)
            .collect();
        Self {
            dim,
            map: row_major(&map),
            rotation: row_major(&q),
            centered,
            shift,
            information,
            tau_hat,
        }
    }

    /// A random rotation with roughly half the directions centered.
    #[cfg(test)]
    pub(crate) fn split_for_tests(dim: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
        let q = SymmetricEigen::new(&a * a.transpose()).eigenvectors;
        let information = (0..dim)
            .map(|m| if m % 2 == 0 { 4.0 } else { 0.25 })
            .collect();
        Self::from_rotation(q, information, 1.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_centered(&self, m: usize) -> bool {
        self.centered[m]
    }

    pub fn n_centered(&self) -> usize {
        self.centered.iter().filter(|&&c| c).count()
    }

    /// Likelihood information along each direction at the Laplace mode.
    pub fn information(&self) -> &[f64] {
        &self.information
    }

    /// The Laplace estimate of `tau` used for the centering decision.
    pub fn tau_hat(&self) -> f64 {
        self.tau_hat
    }

    /// Offset between the stored centered coordinate and `z_m`:
    /// `stored = z_m + shift(m)`.
    pub(crate) fn shift<T: Real>(&self, m: usize, g1: T, g2: T) -> T {
        T::lit(self.shift[0][m]) * g1 + T::lit(self.shift[1][m]) * g2
    }

    /// Derivatives of [`Self::shift`] with respect to `gamma_1`, `gamma_2`.
    pub(crate) fn shift_coefficients(&self, m: usize) -> (f64, f64) {
        (self.shift[0][m], self.shift[1][m])
    }

    /// `r = L Q z`.
    pub(crate) fn map_into<T: Real>(&self, z: &[T], r: &mut [T]) {
        mat_vec(&self.map, self.dim, z, r, false);
    }

    /// `g_z = (L Q)' g_r`.
    pub(crate) fn map_transpose_into<T: Real>(&self, g_r: &[T], g_z: &mut [T]) {
        mat_vec(&self.map, self.dim, g_r, g_z, true);
    }

    /// `z = Q' e`.
    pub(crate) fn rotate_back_into<T: Real>(&self, e: &[T], z: &mut [T]) {
        mat_vec(&self.rotation, self.dim, e, z, true);
    }
}

fn mat_vec<T: Real>(a: &[f64], n: usize, v: &[T], out: &mut [T], transpose: bool) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for i in 0..n {
        let row = &a[i * n..(i + 1) * n];
        if transpose {
            let vi = v[i];
            for (o, &aij) in out.iter_mut().zip(row) {
                *o += T::lit(aij) * vi;
            }
        } else {
            out[i] = row
                .iter()
                .zip(v)
                .fold(T::zero(), |acc, (&aij, &vj)| acc + T::lit(aij) * vj);
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// `L[a, b] = a - b + 1` for `a >= b`: innovations to deviations from the
/// linear extrapolation.
fn double_cumsum(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, b| if a >= b { (a - b + 1) as f64 } else { 0.0 })
}

/// Gaussian prior precision of `(beta, gamma)` at smoothing scale `tau`,
/// ignoring the positivity of the anchors.
fn prior_precision(p: usize, k: usize, spec: &ModelSpec<f64>, tau: f64) -> DMatrix<f64> {
    let d = p + k;
    let mut prec = DMatrix::zeros(d, d);
    for i in 0..p {
        prec[(i, i)] = spec.beta_prior_sd.powi(-2);
    }
    prec[(p, p)] += spec.gamma1_prior_sd.powi(-2);
    prec[(p + 1, p + 1)] += spec.gamma2_prior_sd.powi(-2);
    let w = tau.powi(-2);
    for r in 0..k - 2 {
        let idx = [p + r, p + r + 1, p + r + 2];
        let c = [1.0, -2.0, 1.0];
        for a in 0..3 {
            for b in 0..3 {
                prec[(idx[a], idx[b])] += w * c[a] * c[b];
            }
        }
    }
    prec
}

struct Mode {
    theta: DVector<f64>,
    log_marginal: f64,
    weights: DVector<f64>,
}

/// Penalized logistic Newton iterations at fixed `tau`, then the Laplace
/// log marginal likelihood of `tau` (up to a constant).
fn laplace_at(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    prec: &DMatrix<f64>,
    start: &DVector<f64>,
) -> Option<Mode> {
    let objective = |theta: &DVector<f64>| -> f64 {
        let eta = design * theta;
        let ll: f64 = eta
            .iter()
            .zip(y.iter())
            .map(|(&e, &yi)| yi * e - e.softplus())
            .sum();
        ll - 0.5 * theta.dot(&(prec * theta))
    };
    let mut theta = start.clone();
    let mut value = objective(&theta);
    let mut converged = false;
    for _ in 0..NEWTON_MAX_ITER {
        let eta = design * &theta;
        let prob = eta.map(|e| e.expit());
        let w = prob.map(|q| q * (1.0 - q));
        let grad = design.transpose() * (y - &prob) - prec * &theta;
        let scaled = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| {
            design[(i, j)] * w[i].sqrt()
        });
        let hess = scaled.transpose() * &scaled + prec;
        let step = hess.cholesky()?.solve(&grad);
        let mut t = 1.0;
        loop {
            let cand = &theta + &step * t;
            let v = objective(&cand);
            if v >= value - 1e-12 * value.abs().max(1.0) || t < 1e-8 {
                theta = cand;
                value = v;
                break;
            }
            t *= 0.5;
        }
        if (step.amax() * t) < NEWTON_TOL {
            converged = true;
            break;
        }
    }
    if !converged || !value.is_finite() {
        return None;
    }
    let eta = design * &theta;
    let weights = eta.map(|e| {
        let q = e.expit();
        q * (1.0 - q)
    });
    let scaled = DMatrix::from_fn(design.nrows(), design.ncols(), |i, j| {
        design[(i, j)] * weights[i].sqrt()
    });
    let hess = scaled.transpose() * &scaled + prec;
    let chol = hess.cholesky()?;
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    Some(Mode {
        theta,
        log_marginal: value - 0.5 * log_det,
        weights,
    })
}

/// Builds the innovation basis for a posterior with design `(X, B)` and
/// outcomes `y`. `threshold` is the value of `tau_hat^2 lambda` above which
/// a direction is centered (1 balances prior and likelihood).
pub fn innovation_basis<T: Real>(
    design: &AggregatedDesign<T>,
    y: &[T],
    spec: &ModelSpec<T>,
    threshold: f64,
) -> Result<InnovationBasis, ModelError> {
    let n = design.n_subjects();
    let p = design.n_covariates();
    let k = design.basis_size();
    let m = k - 2;
    let spec64 = ModelSpec {
        basis_size: k,
        domain_lo: spec.domain_lo.to_f64_lossy(),
        domain_hi: spec.domain_hi.to_f64_lossy(),
        beta_prior_sd: spec.beta_prior_sd.to_f64_lossy(),
        gamma1_prior_sd: spec.gamma1_prior_sd.to_f64_lossy(),
        gamma2_prior_sd: spec.gamma2_prior_sd.to_f64_lossy(),
        tau_cauchy_scale: spec.tau_cauchy_scale.to_f64_lossy(),
        anchor_nonnegative: spec.anchor_nonnegative,
        knot_layout: spec.knot_layout,
        parameterization: spec.parameterization,
    };
    let full = DMatrix::from_fn(n, p + k, |i, j| {
        if j < p {
            design.x.get(i, j).to_f64_lossy()
        } else {
            design.b.get(i, j - p).to_f64_lossy()
        }
    });
    let yv = DVector::from_iterator(n, y.iter().map(|v| v.to_f64_lossy()));

    // Laplace marginal of log tau on a grid; the half-Cauchy prior and the
    // log-scale Jacobian enter here, the RW2 normalizer -(K-2) log tau too.
    let (lo, hi, count) = TAU_GRID;
    let mut theta = DVector::zeros(p + k);
    let mut best: Option<(f64, f64, Mode)> = None;
    for g in 0..count {
        let tau = (lo.ln() + (hi / lo).ln() * g as f64 / (count - 1) as f64).exp();
        let prec = prior_precision(p, k, &spec64, tau);
        let Some(mode) = laplace_at(&full, &yv, &prec, &theta) else {
            continue;
        };
        let s = spec64.tau_cauchy_scale;
        let score =
            mode.log_marginal - m as f64 * tau.ln() - (1.0 + (tau / s).powi(2)).ln() + tau.ln();
        theta = mode.theta.clone();
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, tau, mode));
        }
    }
    let Some((_, tau_hat, mode)) = best else {
        return Err(ModelError::InvalidSpec(
            "Laplace approximation failed at every smoothing scale".into(),
        ));
    };

    // Likelihood information in (beta, gamma_1, gamma_2, r) coordinates, with
    // the fixed-effect block profiled out.
    let mut g = DMatrix::zeros(p + k, p + k);
    for i in 0..p {
        g[(i, i)] = 1.0;
    }
    for j in 0..k {
        g[(p + j, p)] = 1.0 - j as f64;
        g[(p + j, p + 1)] = j as f64;
        if j >= 2 {
            g[(p + j, p + j)] = 1.0;
        }
    }
    let scaled = DMatrix::from_fn(n, p + k, |i, j| full[(i, j)] * mode.weights[i].sqrt()) * &g;
    let mut info = scaled.transpose() * &scaled;
    let o = p + 2;
    for i in 0..p {
        info[(i, i)] += spec64.beta_prior_sd.powi(-2);
    }
    info[(p, p)] += spec64.gamma1_prior_sd.powi(-2);
    info[(p + 1, p + 1)] += spec64.gamma2_prior_sd.powi(-2);
    let f_oo = info.view((0, 0), (o, o)).into_owned();
    let f_or = info.view((0, o), (o, m)).into_owned();
    let f_rr = info.view((o, o), (m, m)).into_owned();
    let schur = match f_oo.cholesky() {
        Some(c) => f_rr - f_or.transpose() * c.solve(&f_or),
        None => f_rr,
    };
    let l = double_cumsum(m);
    let whitened = l.transpose() * schur * &l;
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = SymmetricEigen::new(whitened);
    let information = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    Ok(InnovationBasis::from_rotation(
        eig.eigenvectors,
        information,
        tau_hat,
        threshold,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map_is_double_cumsum() {
        let b = InnovationBasis::identity(4);
        let e = [1.0, 0.0, 0.0, 0.0];
        let mut r = [0.0; 4];
        b.map_into(&e, &mut r);
        assert_eq!(r, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(b.n_centered(), 0);
    }

    #[test]
    fn transpose_is_adjoint() {
        let q = SymmetricEigen::new(DMatrix::from_fn(5, 5, |a, b| 1.0 / (1 + a + b) as f64))
            .eigenvectors;
        let b = InnovationBasis::from_rotation(q, vec![1.0; 5], 1.0, 0.5);
        let z = [0.3, -1.0, 2.0, 0.1, 0.7];
        let w = [1.5, 0.2, -0.4, 0.9, -2.0];
        let mut r = [0.0; 5];
        let mut g = [0.0; 5];
        b.map_into(&z, &mut r);
        b.map_transpose_into(&w, &mut g);
        let lhs: f64 = r.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!(b.n_centered(), 5);
    }
}
