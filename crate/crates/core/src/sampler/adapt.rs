//! Warmup adaptation: dual-averaging step size and windowed metric
//! estimation.

use nalgebra::{DMatrix, DVector};

use super::metric::{Metric, MetricKind, MAX_RANK, RANK_EIGEN_FLOOR};

/// Dual averaging toward a target acceptance statistic.
#[derive(Clone, Debug)]
pub struct StepSizeAdapter {
    target: f64,
    mu: f64,
    gamma: f64,
    kappa: f64,
    t0: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl StepSizeAdapter {
    pub fn new(target: f64) -> Self {
        StepSizeAdapter {
            target,
            mu: 0.0,
            gamma: 0.05,
            kappa: 0.75,
            t0: 10.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Restarts averaging around `ln(10 · epsilon)`.
    pub fn restart(&mut self, epsilon: f64) {
        self.mu = (10.0 * epsilon).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Returns the next step size after observing `accept_stat`.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    /// The averaged step size used after warmup.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Welford accumulator for per-coordinate variances.
#[derive(Clone, Debug)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn add(&mut self, q: &[f64]) {
        self.n += 1.0;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(q) {
            let d = x - *m;
            *m += d / self.n;
            *s += d * (x - *m);
        }
    }

    fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|s| s / (self.n - 1.0)).collect()
    }
}

/// Warmup schedule: an initial step-size-only buffer, doubling metric
/// windows, and a terminal step-size-only buffer.
/// Running mean and covariance matrix.
#[derive(Clone, Debug)]
pub struct CovWelford {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl CovWelford {
    pub fn new(dim: usize) -> Self {
        CovWelford { n: 0.0, mean: DVector::zeros(dim), m2: DMatrix::zeros(dim, dim) }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = &x - &self.mean;
        self.m2.ger(1.0, &delta2, &delta, 1.0);
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        if self.n < 2.0 {
            return DMatrix::zeros(self.mean.len(), self.mean.len());
        }
        let c = &self.m2 / (self.n - 1.0);
        (&c + c.transpose()) * 0.5
    }
}

#[derive(Clone, Debug)]
enum Estimator {
    Diagonal(Welford),
    Dense(CovWelford),
    LowRank(Welford, Vec<Vec<f64>>),
}

/// Diagonal variances plus the leading eigenpairs of the correlation of
/// standardized window draws, found through the `n × n` Gram matrix.
fn low_rank_metric(w: &Welford, draws: &[Vec<f64>]) -> Metric {
    let n = w.n;
    let var: Vec<f64> = w.variance().into_iter().map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))).collect();
    let dim = var.len();
    let rows = draws.len();
    let y = DMatrix::from_fn(rows, dim, |r, c| (draws[r][c] - w.mean[c]) / var[c].sqrt());
    let gram = (&y * y.transpose()) / (n - 1.0);
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut cols = Vec::new();
    let mut lambda = Vec::new();
    for &k in order.iter().take(MAX_RANK) {
        let l = eig.eigenvalues[k];
        if !(l > RANK_EIGEN_FLOOR) {
            break;
        }
        let u = y.transpose() * eig.eigenvectors.column(k);
        let norm = u.norm();
        if !(norm > 0.0) {
            break;
        }
        cols.push(u / norm);
        lambda.push((n / (n + 5.0)) * l + 5.0 / (n + 5.0));
    }
    let u = if cols.is_empty() { DMatrix::zeros(dim, 0) } else { DMatrix::from_columns(&cols) };
    Metric::LowRank { var, u, lambda }
}

impl Estimator {
    fn new(kind: MetricKind, dim: usize) -> Self {
        match kind {
            MetricKind::Diagonal => Estimator::Diagonal(Welford::new(dim)),
            MetricKind::Dense => Estimator::Dense(CovWelford::new(dim)),
            MetricKind::LowRank => Estimator::LowRank(Welford::new(dim), Vec::new()),
        }
    }

    fn add(&mut self, q: &[f64]) {
        match self {
            Estimator::Diagonal(w) => w.add(q),
            Estimator::Dense(w) => w.add(q),
            Estimator::LowRank(w, d) => {
                w.add(q);
                d.push(q.to_vec());
            }
        }
    }

    /// Regularized estimate, shrunk toward `1e-3 I`.
    fn metric(&self) -> Metric {
        match self {
            Estimator::Diagonal(w) => {
                let n = w.n;
                Metric::Diagonal(
                    w.variance().into_iter().map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0))).collect(),
                )
            }
            Estimator::Dense(w) => {
                let n = w.n;
                let dim = w.mean.len();
                let cov = w.covariance() * (n / (n + 5.0)) + DMatrix::identity(dim, dim) * (1e-3 * (5.0 / (n + 5.0)));
                Metric::dense(cov)
            }
            Estimator::LowRank(w, d) => low_rank_metric(w, d),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricAdapter {
    num_warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window: usize,
    counter: usize,
    kind: MetricKind,
    dim: usize,
    estimator: Estimator,
    enabled: bool,
}

impl MetricAdapter {
    pub fn new(kind: MetricKind, dim: usize, num_warmup: usize) -> Self {
        let base_window = 25;
        let mut init_buffer = (0.15 * num_warmup as f64) as usize;
        let term_buffer = (0.1 * num_warmup as f64) as usize;
        let mut window = base_window;
        let enabled = num_warmup >= 20;
        if init_buffer + window + term_buffer > num_warmup {
            init_buffer = init_buffer.min(num_warmup);
            window = num_warmup.saturating_sub(init_buffer + term_buffer);
        }
        MetricAdapter {
            num_warmup,
            init_buffer,
            term_buffer,
            window_size: window,
            next_window: (init_buffer + window).saturating_sub(1),
            counter: 0,
            kind,
            dim,
            estimator: Estimator::new(kind, dim),
            enabled: enabled && window > 0,
        }
    }

    fn in_window(&self) -> bool {
        self.counter >= self.init_buffer
            && self.counter < self.num_warmup - self.term_buffer
            && self.counter != self.num_warmup
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window && self.counter != self.num_warmup
    }

    fn compute_next_window(&mut self) {
        let last = self.num_warmup - self.term_buffer - 1;
        if self.next_window == last {
            return;
        }
        self.window_size *= 2;
        self.next_window = self.counter + self.window_size;
        if self.next_window != last && self.next_window + 2 * self.window_size >= self.num_warmup - self.term_buffer {
            self.next_window = last;
        }
    }

    /// Records the warmup iterate `q`; returns `true` and overwrites
    /// `metric` when a window closes.
    pub fn learn(&mut self, metric: &mut Metric, q: &[f64]) -> bool {
        if !self.enabled {
            self.counter += 1;
            return false;
        }
        if self.in_window() {
            self.estimator.add(q);
        }
        if self.end_of_window() {
            self.compute_next_window();
            *metric = self.estimator.metric();
            self.estimator = Estimator::new(self.kind, self.dim);
            self.counter += 1;
            return true;
        }
        self.counter += 1;
        false
    }
}
