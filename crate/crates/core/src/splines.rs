//! Cubic B-spline bases on equally spaced knots and the second-order
//! difference penalty used by the random-walk smoothing prior.
//!
//! The duration domain `[lo, hi]` is cut into `K - 3` equal segments. Two
//! boundary treatments are offered. [`KnotLayout::Extended`] continues the
//! knot grid three spacings past each end, so no knot repeats and every
//! basis is a shifted copy of one cubic. [`KnotLayout::Clamped`] repeats each
//! boundary knot four times instead, which makes `b_1(lo) = 1` and
//! `b_K(hi) = 1`: the first coefficient is then the value of `f` at `lo`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Polynomial degree of every basis. Cubic only.
pub const DEGREE: usize = 3;

/// Smallest supported basis size.
pub const MIN_BASIS_SIZE: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("basis size K = {k} is below the minimum of {min}")]
    BasisTooSmall { k: usize, min: usize },
    #[error("degenerate duration domain [{lo}, {hi}]: need hi > lo >= 0")]
    DegenerateDomain { lo: f64, hi: f64 },
    #[error("duration {z} lies outside the basis domain [{lo}, {hi}]")]
    Extrapolation { z: f64, lo: f64, hi: f64 },
    #[error("duration {z} at index {index} lies outside the basis domain [{lo}, {hi}]")]
    ExtrapolationAt {
        index: usize,
        z: f64,
        lo: f64,
        hi: f64,
    },
}

/// How the knot sequence continues beyond the domain ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnotLayout {
    /// Three more equally spaced knots past each end; strictly ascending.
    Extended,
    /// Each end repeated to multiplicity four; interpolates at the ends.
    #[default]
    Clamped,
}

/// Equally spaced cubic knot sequence on a duration domain.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector<T> {
    layout: KnotLayout,
    interior_count: usize,
    knots: Vec<T>,
    domain_lo: T,
    domain_hi: T,
    spacing: T,
}

/// Builds the extended (no repeated knots) sequence for `basis_size` cubic
/// B-splines on `[lo, hi]`.
pub fn build_knots<T: Real>(basis_size: usize, lo: T, hi: T) -> Result<KnotVector<T>, SplineError> {
    build_knots_with_layout(basis_size, lo, hi, KnotLayout::Extended)
}

pub fn build_knots_with_layout<T: Real>(
    basis_size: usize,
    lo: T,
    hi: T,
    layout: KnotLayout,
) -> Result<KnotVector<T>, SplineError> {
    if basis_size < MIN_BASIS_SIZE {
        return Err(SplineError::BasisTooSmall {
            k: basis_size,
            min: MIN_BASIS_SIZE,
        });
    }
    if !(lo.is_finite() && hi.is_finite()) || lo < T::zero() || hi <= lo {
        return Err(SplineError::DegenerateDomain {
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
        });
    }
    let segments = basis_size - DEGREE;
    let spacing = (hi - lo) / T::from_usize_lossy(segments);
    // Knot i sits at lo + (i - 3) h; the two domain ends are pinned exactly.
    let knots = (0..basis_size + DEGREE + 1)
        .map(|i| match i {
            i if i == DEGREE => lo,
            i if i == DEGREE + segments => hi,
            i if layout == KnotLayout::Clamped && i < DEGREE => lo,
            i if layout == KnotLayout::Clamped && i > DEGREE + segments => hi,
            i => lo + (T::from_usize_lossy(i) - T::from_usize_lossy(DEGREE)) * spacing,
        })
        .collect();
    Ok(KnotVector {
        layout,
        interior_count: basis_size - DEGREE - 1,
        knots,
        domain_lo: lo,
        domain_hi: hi,
        spacing,
    })
}

impl<T: Real> KnotVector<T> {
    pub fn degree(&self) -> usize {
        DEGREE
    }

    pub fn layout(&self) -> KnotLayout {
        self.layout
    }

    /// Number of knots strictly inside the domain.
    pub fn interior_count(&self) -> usize {
        self.interior_count
    }

    /// Number of basis functions K.
    pub fn basis_size(&self) -> usize {
        self.interior_count + DEGREE + 1
    }

    pub fn segments(&self) -> usize {
        self.basis_size() - DEGREE
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn domain(&self) -> (T, T) {
        (self.domain_lo, self.domain_hi)
    }

    pub fn spacing(&self) -> T {
        self.spacing
    }

    pub fn contains(&self, z: T) -> bool {
        z >= self.domain_lo && z <= self.domain_hi
    }

    fn check(&self, z: T) -> Result<(), SplineError> {
        if self.contains(z) {
            Ok(())
        } else {
            Err(SplineError::Extrapolation {
                z: z.to_f64().unwrap_or(f64::NAN),
                lo: self.domain_lo.to_f64_lossy(),
                hi: self.domain_hi.to_f64_lossy(),
            })
        }
    }

    /// Index of the knot span `[t_i, t_{i+1})` holding `z`; the right domain
    /// end belongs to the last span.
    fn span(&self, z: T) -> usize {
        let last = self.basis_size() - 1;
        if z >= self.knots[last + 1] {
            return last;
        }
        // first knot strictly greater than z, within the in-domain knots
        let inside = &self.knots[DEGREE..=last + 1];
        DEGREE + inside.partition_point(|&t| t <= z) - 1
    }

    /// The (at most) four nonzero basis values at `z`, together with the
    /// index of the first one.
    pub fn eval_local(&self, z: T) -> Result<(usize, [T; DEGREE + 1]), SplineError> {
        self.check(z)?;
        let span = self.span(z);
        let t = &self.knots;
        let mut values = [T::zero(); DEGREE + 1];
        let mut left = [T::zero(); DEGREE + 1];
        let mut right = [T::zero(); DEGREE + 1];
        values[0] = T::one();
        for j in 1..=DEGREE {
            left[j] = z - t[span + 1 - j];
            right[j] = t[span + j] - z;
            let mut saved = T::zero();
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        Ok((span - DEGREE, values))
    }

    /// All K basis values at `z`.
    pub fn eval_basis(&self, z: T) -> Result<Vec<T>, SplineError> {
        let mut out = vec![T::zero(); self.basis_size()];
        self.accumulate_basis(z, T::one(), &mut out)?;
        Ok(out)
    }

    /// Adds `weight * b_k(z)` into `out[k]` for every k.
    pub fn accumulate_basis(&self, z: T, weight: T, out: &mut [T]) -> Result<(), SplineError> {
        let (first, values) = self.eval_local(z)?;
        for (slot, v) in out[first..first + DEGREE + 1].iter_mut().zip(values) {
            *slot += weight * v;
        }
        Ok(())
    }

    /// Row-major `zs.len() x K` basis matrix.
    pub fn basis_matrix(&self, zs: &[T]) -> Result<Vec<Vec<T>>, SplineError> {
        zs.iter()
            .enumerate()
            .map(|(index, &z)| {
                self.eval_basis(z)
                    .map_err(|_| SplineError::ExtrapolationAt {
                        index,
                        z: z.to_f64().unwrap_or(f64::NAN),
                        lo: self.domain_lo.to_f64_lossy(),
                        hi: self.domain_hi.to_f64_lossy(),
                    })
            })
            .collect()
    }

    /// `f(z) = sum_k coef_k b_k(z)`.
    pub fn eval_function(&self, coef: &[T], z: T) -> Result<T, SplineError> {
        debug_assert_eq!(coef.len(), self.basis_size());
        let (first, values) = self.eval_local(z)?;
        Ok(values
            .iter()
            .zip(&coef[first..first + DEGREE + 1])
            .map(|(&b, &c)| b * c)
            .sum())
    }

    /// Knot averages `m_k` with `sum_k m_k b_k(z) = z` on the domain.
    pub fn greville(&self) -> Vec<T> {
        let three = T::from_usize_lossy(DEGREE);
        (0..self.basis_size())
            .map(|k| (self.knots[k + 1] + self.knots[k + 2] + self.knots[k + 3]) / three)
            .collect()
    }
}

/// Second-order difference operator `D` of shape `(K-2) x K`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PenaltyOperator {
    basis_size: usize,
}

pub fn difference_penalty(basis_size: usize) -> Result<PenaltyOperator, SplineError> {
    if basis_size < 3 {
        return Err(SplineError::BasisTooSmall {
            k: basis_size,
            min: 3,
        });
    }
    Ok(PenaltyOperator { basis_size })
}

impl PenaltyOperator {
    pub fn order(&self) -> usize {
        2
    }

    pub fn basis_size(&self) -> usize {
        self.basis_size
    }

    pub fn n_rows(&self) -> usize {
        self.basis_size - 2
    }

    /// Dense integer rows, each `(1, -2, 1)` on a sliding window.
    pub fn rows(&self) -> Vec<Vec<i64>> {
        (0..self.n_rows())
            .map(|r| {
                let mut row = vec![0; self.basis_size];
                row[r] = 1;
                row[r + 1] = -2;
                row[r + 2] = 1;
                row
            })
            .collect()
    }

    /// `(D g)_k = g_{k+2} - 2 g_{k+1} + g_k`.
    pub fn apply<T: Real>(&self, coef: &[T]) -> Vec<T> {
        assert_eq!(coef.len(), self.basis_size, "coefficient length");
        coef.windows(3)
            .map(|w| w[2] - (w[1] + w[1]) + w[0])
            .collect()
    }

    /// Exact integer version of [`apply`](Self::apply).
    pub fn apply_exact(&self, coef: &[i64]) -> Vec<i64> {
        assert_eq!(coef.len(), self.basis_size, "coefficient length");
        coef.windows(3).map(|w| w[2] - 2 * w[1] + w[0]).collect()
    }

    /// Adds `D^T v` into `out`.
    pub fn accumulate_transpose<T: Real>(&self, v: &[T], out: &mut [T]) {
        assert_eq!(v.len(), self.n_rows());
        assert_eq!(out.len(), self.basis_size);
        for (k, &vk) in v.iter().enumerate() {
            out[k] += vk;
            out[k + 1] -= vk + vk;
            out[k + 2] += vk;
        }
    }
}
