//! One No-U-Turn transition with multinomial sampling along the trajectory
//! and a diagonal Euclidean metric.

use rand::Rng;
use rand_distr::StandardNormal;

use super::LogDensity;
use crate::scalar::{log_add_exp, Real};

/// A point in phase space with cached density and gradient.
#[derive(Debug, Clone)]
pub(crate) struct PhasePoint<T> {
    pub q: Vec<T>,
    pub p: Vec<T>,
    pub grad: Vec<T>,
    pub logp: T,
}

impl<T: Real> PhasePoint<T> {
    pub(crate) fn at<D: LogDensity<T>>(target: &D, q: Vec<T>) -> Result<Self, D::Error> {
        let mut grad = vec![T::zero(); q.len()];
        let logp = target.logp_and_grad(&q, &mut grad)?;
        let dim = q.len();
        Ok(Self {
            q,
            p: vec![T::zero(); dim],
            grad,
            logp,
        })
    }
}

/// Euclidean metric given by the inverse mass matrix, diagonal or dense.
#[derive(Debug, Clone)]
pub(crate) enum Metric<T> {
    Diagonal(Vec<T>),
    /// Row-major inverse mass `S` with its lower Cholesky factor `L L' = S`.
    Dense {
        inv_mass: Vec<T>,
        chol: Vec<T>,
    },
}

impl<T: Real> Metric<T> {
    pub(crate) fn unit(dim: usize) -> Self {
        Metric::Diagonal(vec![T::one(); dim])
    }

    /// Dense metric from a covariance estimate; `None` when it is not
    /// positive definite.
    pub(crate) fn dense(inv_mass: Vec<T>, dim: usize) -> Option<Self> {
        let chol = cholesky(&inv_mass, dim)?;
        Some(Metric::Dense { inv_mass, chol })
    }

    pub(crate) fn diagonal(&self) -> Vec<T> {
        match self {
            Metric::Diagonal(m) => m.clone(),
            Metric::Dense { inv_mass, .. } => {
                let d = (inv_mass.len() as f64).sqrt() as usize;
                (0..d).map(|i| inv_mass[i * d + i]).collect()
            }
        }
    }

    pub(crate) fn matrix(&self) -> Option<&[T]> {
        match self {
            Metric::Diagonal(_) => None,
            Metric::Dense { inv_mass, .. } => Some(inv_mass),
        }
    }

    /// `out = M^{-1} p`.
    pub(crate) fn velocity_into(&self, p: &[T], out: &mut [T]) {
        match self {
            Metric::Diagonal(m) => {
                for ((o, &pi), &mi) in out.iter_mut().zip(p).zip(m) {
                    *o = pi * mi;
                }
            }
            Metric::Dense { inv_mass, .. } => {
                let d = p.len();
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot(&inv_mass[i * d..(i + 1) * d], p);
                }
            }
        }
    }

    pub(crate) fn velocity(&self, p: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); p.len()];
        self.velocity_into(p, &mut out);
        out
    }

    pub(crate) fn kinetic(&self, p: &[T]) -> T {
        match self {
            Metric::Diagonal(m) => {
                p.iter().zip(m).map(|(&pi, &mi)| pi * pi * mi).sum::<T>() * T::lit(0.5)
            }
            Metric::Dense { .. } => dot(p, &self.velocity(p)) * T::lit(0.5),
        }
    }

    /// Draws `p ~ N(0, M)`.
    pub(crate) fn sample_momentum<R: Rng>(&self, rng: &mut R, p: &mut [T]) {
        for pi in p.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *pi = T::lit(n);
        }
        match self {
            Metric::Diagonal(m) => {
                for (pi, &mi) in p.iter_mut().zip(m) {
                    *pi /= mi.sqrt();
                }
            }
            Metric::Dense { chol, .. } => {
                // solve L' p = z, so that Cov(p) = (L L')^{-1}
                let d = p.len();
                for i in (0..d).rev() {
                    let mut acc = p[i];
                    for j in i + 1..d {
                        acc -= chol[j * d + i] * p[j];
                    }
                    p[i] = acc / chol[i * d + i];
                }
            }
        }
    }

    pub(crate) fn hamiltonian(&self, z: &PhasePoint<T>) -> T {
        self.kinetic(&z.p) - z.logp
    }
}

/// Lower Cholesky factor of a symmetric row-major matrix.
pub(crate) fn cholesky<T: Real>(a: &[T], d: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > T::zero()) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Leapfrog step in place. A target error leaves `z` unusable and is
/// reported as `false`.
pub(crate) fn leapfrog<T: Real, D: LogDensity<T>>(
    target: &D,
    metric: &Metric<T>,
    z: &mut PhasePoint<T>,
    eps: T,
) -> bool {
    let half = eps * T::lit(0.5);
    for (p, &g) in z.p.iter_mut().zip(&z.grad) {
        *p += half * g;
    }
    let v = metric.velocity(&z.p);
    for (q, &vi) in z.q.iter_mut().zip(&v) {
        *q += eps * vi;
    }
    match target.logp_and_grad(&z.q, &mut z.grad) {
        Ok(lp) if lp.is_finite() => {
            z.logp = lp;
            for (p, &g) in z.p.iter_mut().zip(&z.grad) {
                *p += half * g;
            }
            true
        }
        _ => false,
    }
}

/// A contiguous stretch of trajectory, oriented in integration time.
struct Tree<T> {
    left: PhasePoint<T>,
    right: PhasePoint<T>,
    p_sharp_left: Vec<T>,
    p_sharp_right: Vec<T>,
    rho: Vec<T>,
    log_sum_weight: T,
    proposal: PhasePoint<T>,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn no_u_turn<T: Real>(p_sharp_minus: &[T], p_sharp_plus: &[T], rho: &[T]) -> bool {
    dot(p_sharp_plus, rho) > T::zero() && dot(p_sharp_minus, rho) > T::zero()
}

fn add<T: Real>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

/// Checks the merged trajectory and both extended junctions.
fn merged_ok<T: Real>(l: &Tree<T>, r: &Tree<T>, rho: &[T]) -> bool {
    no_u_turn(&l.p_sharp_left, &r.p_sharp_right, rho)
        && no_u_turn(&l.p_sharp_left, &r.p_sharp_left, &add(&l.rho, &r.left.p))
        && no_u_turn(&l.p_sharp_right, &r.p_sharp_right, &add(&l.right.p, &r.rho))
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct TransitionInfo {
    pub divergent: bool,
    pub tree_depth: u32,
    pub n_leapfrog: u32,
    pub accept_stat: f64,
    pub energy: f64,
}

struct Builder<'a, T, D> {
    target: &'a D,
    metric: &'a Metric<T>,
    eps: T,
    h0: T,
    max_energy_error: T,
    n_leapfrog: u32,
    sum_metro_prob: T,
    divergent: bool,
}

impl<T: Real, D: LogDensity<T>> Builder<'_, T, D> {
    /// Builds a subtree of `2^depth` steps starting from `from` and moving in
    /// `direction`. `None` means divergence or an internal U-turn.
    fn build<R: Rng>(
        &mut self,
        rng: &mut R,
        from: &PhasePoint<T>,
        depth: u32,
        forward: bool,
    ) -> Option<Tree<T>> {
        if depth == 0 {
            let mut z = from.clone();
            let step = if forward { self.eps } else { -self.eps };
            self.n_leapfrog += 1;
            let ok = leapfrog(self.target, self.metric, &mut z, step);
            let h = if ok {
                self.metric.hamiltonian(&z)
            } else {
                T::infinity()
            };
            let h = if h.is_nan() { T::infinity() } else { h };
            if h - self.h0 > self.max_energy_error {
                self.divergent = true;
                return None;
            }
            let log_w = self.h0 - h;
            self.sum_metro_prob += if log_w > T::zero() {
                T::one()
            } else {
                log_w.exp()
            };
            let sharp = self.metric.velocity(&z.p);
            return Some(Tree {
                left: z.clone(),
                right: z.clone(),
                p_sharp_left: sharp.clone(),
                p_sharp_right: sharp,
                rho: z.p.clone(),
                log_sum_weight: log_w,
                proposal: z,
            });
        }
        let first = self.build(rng, from, depth - 1, forward)?;
        let edge = if forward { &first.right } else { &first.left };
        let second = self.build(rng, &edge.clone(), depth - 1, forward)?;
        let log_sum_weight = log_add_exp(first.log_sum_weight, second.log_sum_weight);
        // uniform progressive sampling inside a subtree
        let take_second = {
            let accept = (second.log_sum_weight - log_sum_weight)
                .exp()
                .to_f64_lossy();
            rng.random::<f64>() < accept
        };
        let (l, r) = if forward {
            (first, second)
        } else {
            (second, first)
        };
        let rho = add(&l.rho, &r.rho);
        if !merged_ok(&l, &r, &rho) {
            return None;
        }
        let proposal = match (take_second, forward) {
            (true, true) | (false, false) => r.proposal,
            _ => l.proposal,
        };
        Some(Tree {
            left: l.left,
            right: r.right,
            p_sharp_left: l.p_sharp_left,
            p_sharp_right: r.p_sharp_right,
            rho,
            log_sum_weight,
            proposal,
        })
    }
}

/// Runs one NUTS transition from `current`, returning the new point.
pub(crate) fn transition<T: Real, D: LogDensity<T>, R: Rng>(
    target: &D,
    metric: &Metric<T>,
    eps: T,
    max_depth: u32,
    max_energy_error: T,
    current: &PhasePoint<T>,
    rng: &mut R,
) -> (PhasePoint<T>, TransitionInfo) {
    let mut z0 = current.clone();
    metric.sample_momentum(rng, &mut z0.p);
    let h0 = metric.hamiltonian(&z0);
    let sharp = metric.velocity(&z0.p);
    let mut tree = Tree {
        left: z0.clone(),
        right: z0.clone(),
        p_sharp_left: sharp.clone(),
        p_sharp_right: sharp,
        rho: z0.p.clone(),
        log_sum_weight: T::zero(),
        proposal: z0,
    };
    let mut b = Builder {
        target,
        metric,
        eps,
        h0,
        max_energy_error,
        n_leapfrog: 0,
        sum_metro_prob: T::zero(),
        divergent: false,
    };
    let mut depth = 0;
    while depth < max_depth {
        let forward = rng.random::<bool>();
        let from = if forward {
            tree.right.clone()
        } else {
            tree.left.clone()
        };
        let Some(sub) = b.build(rng, &from, depth, forward) else {
            break;
        };
        depth += 1;
        // biased progressive sampling between old trajectory and new subtree
        let accept = (sub.log_sum_weight - tree.log_sum_weight)
            .exp()
            .to_f64_lossy();
        let take_new = accept >= 1.0 || rng.random::<f64>() < accept;
        let log_sum_weight = log_add_exp(tree.log_sum_weight, sub.log_sum_weight);
        let old_proposal = tree.proposal;
        let (l, r) = if forward {
            (
                Tree {
                    proposal: old_proposal.clone(),
                    ..tree
                },
                sub,
            )
        } else {
            (
                sub,
                Tree {
                    proposal: old_proposal.clone(),
                    ..tree
                },
            )
        };
        let rho = add(&l.rho, &r.rho);
        let keep_going = merged_ok(&l, &r, &rho);
        let proposal = if take_new {
            if forward {
                r.proposal
            } else {
                l.proposal
            }
        } else {
            old_proposal
        };
        tree = Tree {
            left: l.left,
            right: r.right,
            p_sharp_left: l.p_sharp_left,
            p_sharp_right: r.p_sharp_right,
            rho,
            log_sum_weight,
            proposal,
        };
        if !keep_going {
            break;
        }
    }
    let n = b.n_leapfrog.max(1);
    let accept_stat = (b.sum_metro_prob / T::from_usize_lossy(n as usize)).to_f64_lossy();
    let mut next = tree.proposal;
    next.p.iter_mut().for_each(|p| *p = T::zero());
    let energy = (metric.kinetic(&next.p) - next.logp).to_f64_lossy();
    (
        next,
        TransitionInfo {
            divergent: b.divergent,
            tree_depth: depth,
            n_leapfrog: b.n_leapfrog,
            accept_stat,
            energy,
        },
    )
}

/// Doubles or halves the step until one leapfrog step crosses 0.8
/// acceptance.
pub(crate) fn find_reasonable_step<T: Real, D: LogDensity<T>, R: Rng>(
    target: &D,
    metric: &Metric<T>,
    start: &PhasePoint<T>,
    initial: T,
    rng: &mut R,
) -> T {
    let log_target = T::lit(0.8_f64.ln());
    let mut eps = initial;
    let mut direction = 0i8;
    for _ in 0..100 {
        let mut z = start.clone();
        metric.sample_momentum(rng, &mut z.p);
        let h0 = metric.hamiltonian(&z);
        let ok = leapfrog(target, metric, &mut z, eps);
        let h = if ok {
            metric.hamiltonian(&z)
        } else {
            T::infinity()
        };
        let delta = if h.is_nan() {
            T::neg_infinity()
        } else {
            h0 - h
        };
        let up = delta > log_target;
        if direction == 0 {
            direction = if up { 1 } else { -1 };
        } else if (direction == 1 && !up) || (direction == -1 && up) {
            break;
        }
        eps = if direction == 1 {
            eps * T::lit(2.0)
        } else {
            eps * T::lit(0.5)
        };
        if eps > T::lit(1e7) || eps < T::lit(1e-12) {
            break;
        }
    }
    eps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cholesky_reconstructs() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let l = cholesky(&a, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l[i * 3 + k] * l[j * 3 + k]).sum();
                assert!((v - a[i * 3 + j]).abs() < 1e-12);
            }
        }
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
    }

    #[test]
    fn dense_momentum_has_inverse_covariance() {
        // Cov(p) must be S^{-1}; check E[p p'] S = I by Monte Carlo
        let s = vec![2.0, 0.6, 0.6, 0.5];
        let metric = Metric::dense(s.clone(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200_000;
        let mut c = [0.0; 4];
        let mut p = [0.0; 2];
        for _ in 0..n {
            metric.sample_momentum(&mut rng, &mut p);
            c[0] += p[0] * p[0];
            c[1] += p[0] * p[1];
            c[3] += p[1] * p[1];
        }
        c[2] = c[1];
        let c: Vec<f64> = c.iter().map(|v| v / n as f64).collect();
        let prod = [
            c[0] * s[0] + c[1] * s[2],
            c[0] * s[1] + c[1] * s[3],
            c[2] * s[0] + c[3] * s[2],
            c[2] * s[1] + c[3] * s[3],
        ];
        for (got, want) in prod.iter().zip([1.0, 0.0, 0.0, 1.0]) {
            assert!((got - want).abs() < 0.02, "{prod:?}");
        }
        // kinetic energy is half p' S p
        let q = [0.3, -1.2];
        let k = 0.5 * (q[0] * (s[0] * q[0] + s[1] * q[1]) + q[1] * (s[2] * q[0] + s[3] * q[1]));
        assert!((metric.kinetic(&q) - k).abs() < 1e-12);
    }
}
