//! Euclidean metrics: the inverse mass matrix used by the integrator.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Diagonal,
    Dense,
    /// Diagonal scaling plus a few principal directions of the warmup draws.
    #[default]
    LowRank,
}

/// Most principal directions a low-rank metric keeps.
pub const MAX_RANK: usize = 10;

/// Standardized eigenvalues at or below this are left to the diagonal.
pub const RANK_EIGEN_FLOOR: f64 = 2.0;

#[derive(Clone, Debug)]
pub enum Metric {
    /// Per-coordinate variances.
    Diagonal(Vec<f64>),
    /// Full covariance with its lower Cholesky factor.
    Dense { cov: DMatrix<f64>, chol: DMatrix<f64> },
    /// `M⁻¹ = S (I + U (Λ − I) Uᵀ) S` with `S = diag(sqrt(var))` and
    /// orthonormal columns `U`.
    LowRank { var: Vec<f64>, u: DMatrix<f64>, lambda: Vec<f64> },
}

impl Metric {
    pub fn unit(kind: MetricKind, dim: usize) -> Self {
        match kind {
            MetricKind::Diagonal => Metric::Diagonal(vec![1.0; dim]),
            MetricKind::Dense => Metric::Dense {
                cov: DMatrix::identity(dim, dim),
                chol: DMatrix::identity(dim, dim),
            },
            MetricKind::LowRank => Metric::LowRank {
                var: vec![1.0; dim],
                u: DMatrix::zeros(dim, 0),
                lambda: Vec::new(),
            },
        }
    }

    /// Applies `I + U (diag(f(λ)) − I) Uᵀ` to `y` in place.
    fn low_rank_apply(u: &DMatrix<f64>, lambda: &[f64], f: impl Fn(f64) -> f64, y: &mut [f64]) {
        for (k, &l) in lambda.iter().enumerate() {
            let col = u.column(k);
            let c = (f(l) - 1.0) * col.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
            for (yi, a) in y.iter_mut().zip(col.iter()) {
                *yi += c * a;
            }
        }
    }

    /// Builds a dense metric; falls back to the diagonal of `cov` if it is
    /// not positive definite.
    pub fn dense(cov: DMatrix<f64>) -> Self {
        match cov.clone().cholesky() {
            Some(c) => Metric::Dense { chol: c.l(), cov },
            None => Metric::Diagonal(cov.diagonal().iter().copied().collect()),
        }
    }

    /// `M⁻¹ p`.
    pub fn velocity(&self, p: &[f64], out: &mut [f64]) {
        match self {
            Metric::Diagonal(m) => {
                for ((o, p), m) in out.iter_mut().zip(p).zip(m) {
                    *o = p * m;
                }
            }
            Metric::Dense { cov, .. } => {
                let v = cov * DVector::from_column_slice(p);
                out.copy_from_slice(v.as_slice());
            }
            Metric::LowRank { var, u, lambda } => {
                for ((o, p), v) in out.iter_mut().zip(p).zip(var) {
                    *o = p * v.sqrt();
                }
                Self::low_rank_apply(u, lambda, |l| l, out);
                for (o, v) in out.iter_mut().zip(var) {
                    *o *= v.sqrt();
                }
            }
        }
    }

    /// Draws `p ~ N(0, M)`.
    pub fn sample_momentum(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = StandardNormal.sample(rng);
        }
        match self {
            Metric::Diagonal(m) => {
                for (o, m) in out.iter_mut().zip(m) {
                    *o /= m.sqrt();
                }
            }
            Metric::Dense { chol, .. } => {
                let e = DVector::from_column_slice(out);
                let p = chol
                    .transpose()
                    .solve_upper_triangular(&e)
                    .expect("Cholesky factor has a positive diagonal");
                out.copy_from_slice(p.as_slice());
            }
            Metric::LowRank { var, u, lambda } => {
                Self::low_rank_apply(u, lambda, |l| 1.0 / l.sqrt(), out);
                for (o, v) in out.iter_mut().zip(var) {
                    *o /= v.sqrt();
                }
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            Metric::Diagonal(m) => m.clone(),
            Metric::Dense { cov, .. } => cov.diagonal().iter().copied().collect(),
            Metric::LowRank { var, u, lambda } => (0..var.len())
                .map(|i| {
                    let extra: f64 = lambda.iter().enumerate().map(|(k, l)| (l - 1.0) * u[(i, k)] * u[(i, k)]).sum();
                    var[i] * (1.0 + extra)
                })
                .collect(),
        }
    }
}
