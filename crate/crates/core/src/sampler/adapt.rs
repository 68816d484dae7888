//! Warmup adaptation: dual-averaging step size and windowed diagonal metric.

use crate::scalar::Real;

/// Nesterov dual averaging of `log(step size)` towards a target acceptance.
#[derive(Debug, Clone)]
pub(crate) struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub(crate) fn new(target: f64, initial_step: f64) -> Self {
        let mut da = Self {
            target,
            mu: 0.0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        };
        da.restart(initial_step);
        da
    }

    pub(crate) fn restart(&mut self, step: f64) {
        self.mu = (10.0 * step).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feeds one acceptance statistic, returns the next step size.
    pub(crate) fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let accept = if accept_stat.is_finite() {
            accept_stat.min(1.0)
        } else {
            0.0
        };
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    pub(crate) fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variance.
#[derive(Debug, Clone)]
pub(crate) struct VarianceEstimator<T> {
    n: usize,
    mean: Vec<T>,
    m2: Vec<T>,
}

impl<T: Real> VarianceEstimator<T> {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![T::zero(); dim],
            m2: vec![T::zero(); dim],
        }
    }

    pub(crate) fn add(&mut self, x: &[T]) {
        self.n += 1;
        let n = T::from_usize_lossy(self.n);
        for ((m, s), &xi) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = xi - *m;
            *m += delta / n;
            *s += delta * (xi - *m);
        }
    }

    /// Variance shrunk towards `1e-3`, as used for the inverse metric.
    pub(crate) fn regularized(&self) -> Vec<T> {
        let n = T::from_usize_lossy(self.n);
        let five = T::lit(5.0);
        self.m2
            .iter()
            .map(|&s| {
                let var = s / (n - T::one());
                (n / (n + five)) * var + T::lit(1e-3) * (five / (n + five))
            })
            .collect()
    }

    pub(crate) fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = T::zero());
        self.m2.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Welford accumulator for the full covariance matrix.
#[derive(Debug, Clone)]
pub(crate) struct CovarianceEstimator<T> {
    n: usize,
    mean: Vec<T>,
    m2: Vec<T>,
}

impl<T: Real> CovarianceEstimator<T> {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![T::zero(); dim],
            m2: vec![T::zero(); dim * dim],
        }
    }

    pub(crate) fn add(&mut self, x: &[T]) {
        self.n += 1;
        let d = self.mean.len();
        let n = T::from_usize_lossy(self.n);
        let delta: Vec<T> = x.iter().zip(&self.mean).map(|(&xi, &m)| xi - m).collect();
        for (m, &dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += after * delta[j];
            }
        }
    }

    /// Covariance shrunk towards `1e-3 I`, symmetrized.
    pub(crate) fn regularized(&self) -> Vec<T> {
        let d = self.mean.len();
        let n = T::from_usize_lossy(self.n);
        let five = T::lit(5.0);
        let mut out = vec![T::zero(); d * d];
        for i in 0..d {
            for j in 0..d {
                let cov = (self.m2[i * d + j] + self.m2[j * d + i]) * T::lit(0.5) / (n - T::one());
                out[i * d + j] = (n / (n + five)) * cov;
            }
            out[i * d + i] += T::lit(1e-3) * (five / (n + five));
        }
        out
    }

    pub(crate) fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|v| *v = T::zero());
        self.m2.iter_mut().for_each(|v| *v = T::zero());
    }
}

/// Warmup schedule: a fast initial buffer, doubling slow windows for the
/// metric, and a fast terminal buffer.
#[derive(Debug, Clone)]
pub(crate) struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
}

impl WindowSchedule {
    pub(crate) fn new(warmup: usize) -> Self {
        let (mut init_buffer, mut term_buffer, mut base) = (75, 50, 25);
        if init_buffer + term_buffer + base > warmup {
            init_buffer = (0.15 * warmup as f64) as usize;
            term_buffer = (0.1 * warmup as f64) as usize;
            base = warmup - (init_buffer + term_buffer);
        }
        Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size: base,
            next_window_end: init_buffer + base - 1,
            counter: 0,
        }
    }

    fn in_slow_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.warmup - self.term_buffer
            && self.counter != self.warmup
    }

    fn at_window_end(&self) -> bool {
        self.counter == self.next_window_end && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.warmup - self.term_buffer - 1;
        if self.next_window_end == last {
            return;
        }
        self.window_size *= 2;
        self.next_window_end = self.counter + self.window_size;
        if self.next_window_end != last {
            let boundary = self.next_window_end + 2 * self.window_size;
            if boundary >= self.warmup - self.term_buffer {
                self.next_window_end = last;
            }
        }
    }

    /// Advances one warmup iteration. Returns `(collect, window_closed)`.
    pub(crate) fn step(&mut self) -> (bool, bool) {
        let collect = self.in_slow_window();
        let closed = self.at_window_end();
        if closed {
            self.compute_next_window();
        }
        self.counter += 1;
        (collect, closed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_windows() {
        let mut s = WindowSchedule::new(1000);
        let mut ends = vec![];
        let mut collected = 0;
        for i in 0..1000 {
            let (collect, closed) = s.step();
            collected += collect as usize;
            if closed {
                ends.push(i);
            }
        }
        assert_eq!(ends, vec![99, 149, 249, 449, 949]);
        assert_eq!(collected, 875);
    }

    #[test]
    fn short_warmup_schedule() {
        let mut s = WindowSchedule::new(100);
        let ends: Vec<usize> = (0..100).filter(|_| s.step().1).collect();
        assert_eq!(ends, vec![89]);
    }

    #[test]
    fn dual_averaging_moves_towards_target() {
        let mut da = DualAveraging::new(0.8, 1.0);
        // persistently low acceptance must shrink the step
        let mut step = 1.0;
        for _ in 0..50 {
            step = da.update(0.2);
        }
        assert!(step < 0.5);
        assert!(da.final_step() < 1.0);
    }

    #[test]
    fn covariance_matches_two_pass() {
        let xs: Vec<[f64; 2]> = (0..50)
            .map(|i| {
                let t = i as f64;
                [t.sin(), 0.5 * t.sin() + (3.0 * t).cos()]
            })
            .collect();
        let mut est = CovarianceEstimator::<f64>::new(2);
        xs.iter().for_each(|x| est.add(x));
        let n = xs.len() as f64;
        let m: Vec<f64> = (0..2)
            .map(|j| xs.iter().map(|x| x[j]).sum::<f64>() / n)
            .collect();
        let c = est.regularized();
        for i in 0..2 {
            for j in 0..2 {
                let cov = xs
                    .iter()
                    .map(|x| (x[i] - m[i]) * (x[j] - m[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                let want = n / (n + 5.0) * cov + if i == j { 1e-3 * 5.0 / (n + 5.0) } else { 0.0 };
                assert!((c[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn welford_variance() {
        let mut est = VarianceEstimator::<f64>::new(2);
        for i in 0..1000 {
            let x = i as f64;
            est.add(&[x, 2.0 * x]);
        }
        let v = est.regularized();
        let exact = 1000.0 * 1001.0 / 12.0;
        let shrunk = 1000.0 / 1005.0 * exact + 1e-3 * 5.0 / 1005.0;
        assert!((v[0] - shrunk).abs() / shrunk < 1e-12);
        assert!(
            (v[1] - (4.0 * (shrunk - 1e-3 * 5.0 / 1005.0) + 1e-3 * 5.0 / 1005.0)).abs() / v[1]
                < 1e-12
        );
    }
}
