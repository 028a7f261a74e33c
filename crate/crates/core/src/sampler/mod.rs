//! No-U-turn Hamiltonian Monte Carlo with warmup adaptation and
//! convergence diagnostics.

mod adapt;
pub mod diagnostics;
mod draws;
mod metric;
mod nuts;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adapt::{MetricAdapter, StepSizeAdapter};
pub use diagnostics::{ess, rhat, split_rhat_columns, ParameterDiagnostics};
pub use draws::PosteriorDraws;
pub use metric::MetricKind;
pub use nuts::TransitionInfo;

use crate::error::{Error, Result};
use crate::model::Posterior;
use metric::Metric;
use nuts::{Nuts, Point};

/// A differentiable log-density over an unconstrained space.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log-density at `theta`; writes the gradient into `grad`.
    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|k| format!("theta[{k}]")).collect()
    }

    /// Maps an unconstrained point to the values recorded in the draws.
    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        theta.to_vec()
    }

    /// Starting point for a chain when none is supplied.
    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.dim()).map(|_| rng.random_range(-2.0..2.0)).collect()
    }
}

impl Target for Posterior {
    fn dim(&self) -> usize {
        Posterior::dim(self)
    }

    fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        Posterior::log_density_grad(self, theta, grad)
    }

    fn param_names(&self) -> Vec<String> {
        self.layout().names().to_vec()
    }

    fn constrain(&self, theta: &[f64]) -> Vec<f64> {
        self.layout().constrain_flat(theta)
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.prior_draw(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_leapfrog: usize,
    pub seed: u64,
    pub metric: MetricKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 500,
            draws: 1000,
            target_accept: 0.8,
            max_leapfrog: 1024,
            seed: 0,
            metric: MetricKind::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.warmup == 0 || self.draws == 0 || self.max_leapfrog == 0 {
            return Err(Error::Config("chains, warmup, draws and max_leapfrog must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn max_depth(&self) -> usize {
        (usize::BITS - 1 - self.max_leapfrog.leading_zeros()) as usize
    }
}

/// Fraction of divergent post-warmup transitions that triggers a warning.
pub const DIVERGENCE_WARNING_FRACTION: f64 = 0.2;

struct ChainOutput {
    values: Vec<Vec<f64>>,
    info: Vec<TransitionInfo>,
    step_size: f64,
    inv_metric: Vec<f64>,
}

fn find_start(target: &dyn Target, rng: &mut ChaCha8Rng, init: Option<&[f64]>) -> Result<Point> {
    if let Some(init) = init {
        if init.len() != target.dim() || init.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampler("initial point must be finite and match the dimension".into()));
        }
        let z = Point::new(target, init.to_vec());
        if !z.logp.is_finite() || z.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Sampler("log-density or gradient not finite at the initial point".into()));
        }
        return Ok(z);
    }
    for _ in 0..100 {
        let z = Point::new(target, target.initial_point(rng));
        if z.logp.is_finite() && z.grad.iter().all(|g| g.is_finite()) {
            return Ok(z);
        }
    }
    Err(Error::Sampler("no finite starting point found in 100 attempts".into()))
}

fn run_chain(target: &dyn Target, cfg: &SamplerConfig, chain: usize, init: Option<&[f64]>) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chain as u64);
    let mut z = find_start(target, &mut rng, init)?;
    let dim = target.dim();
    let mut nuts = Nuts {
        target,
        metric: Metric::unit(cfg.metric, dim),
        step_size: 1.0,
        max_depth: cfg.max_depth(),
        max_leapfrog: cfg.max_leapfrog,
    };
    nuts.init_step_size(&z, &mut rng);
    let mut step_adapt = StepSizeAdapter::new(cfg.target_accept);
    step_adapt.restart(nuts.step_size);
    let mut metric_adapt = MetricAdapter::new(cfg.metric, dim, cfg.warmup);

    for _ in 0..cfg.warmup {
        let (next, info) = nuts.transition(&z, &mut rng);
        z = next;
        nuts.step_size = step_adapt.learn(info.accept_stat);
        if metric_adapt.learn(&mut nuts.metric, &z.q) {
            nuts.init_step_size(&z, &mut rng);
            step_adapt.restart(nuts.step_size);
        }
    }
    nuts.step_size = step_adapt.final_step_size();

    let mut values = Vec::with_capacity(cfg.draws);
    let mut info = Vec::with_capacity(cfg.draws);
    for _ in 0..cfg.draws {
        let (next, i) = nuts.transition(&z, &mut rng);
        z = next;
        values.push(target.constrain(&z.q));
        info.push(i);
    }
    Ok(ChainOutput {
        values,
        info,
        step_size: nuts.step_size,
        inv_metric: nuts.metric.diagonal(),
    })
}

/// Runs `cfg.chains` independent chains in parallel. Output is identical
/// for identical inputs regardless of thread scheduling.
/// Every chain starts from `init` when given, else from the target's
/// `initial_point`.
pub fn sample(target: &dyn Target, cfg: &SamplerConfig, init: Option<&[f64]>) -> Result<PosteriorDraws> {
    run_chains(target, cfg, &|_| init)
}

/// Like [`sample`], with one starting point per chain.
pub fn sample_with_inits(target: &dyn Target, cfg: &SamplerConfig, inits: &[Vec<f64>]) -> Result<PosteriorDraws> {
    if inits.len() != cfg.chains {
        return Err(Error::Sampler(format!(
            "{} initial points for {} chains",
            inits.len(),
            cfg.chains
        )));
    }
    run_chains(target, cfg, &|c| Some(inits[c].as_slice()))
}

fn run_chains<'a>(
    target: &dyn Target,
    cfg: &SamplerConfig,
    init: &(dyn Fn(usize) -> Option<&'a [f64]> + Sync),
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    if target.dim() == 0 {
        return Err(Error::Sampler("target has zero dimension".into()));
    }
    let outputs: Vec<Result<ChainOutput>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c, init(c)))
        .collect();
    let mut draws = PosteriorDraws::new(target.param_names(), cfg.chains);
    for (c, out) in outputs.into_iter().enumerate() {
        let out = out?;
        draws.step_sizes.push(out.step_size);
        draws.inv_metrics.push(out.inv_metric);
        for (v, i) in out.values.into_iter().zip(out.info) {
            draws.push(c, v, i);
        }
    }
    let n = draws.len() as f64;
    let n_div = draws.divergences.iter().filter(|&&d| d).count();
    if n_div as f64 > DIVERGENCE_WARNING_FRACTION * n {
        draws.warnings.push(format!(
            "{n_div} of {} post-warmup transitions diverged",
            draws.len()
        ));
    }
    Ok(draws)
}

/// Largest Hamiltonian error along an `n_steps` leapfrog trajectory from
/// `(q, p)` under a unit metric.
pub fn max_energy_error(target: &dyn Target, q: &[f64], p: &[f64], step_size: f64, n_steps: usize) -> f64 {
    let nuts = Nuts {
        target,
        metric: Metric::unit(MetricKind::Diagonal, q.len()),
        step_size,
        max_depth: 0,
        max_leapfrog: 0,
    };
    let mut z = Point::new(target, q.to_vec());
    z.p = p.to_vec();
    z.v = p.to_vec();
    let energy = |z: &Point| -z.logp + 0.5 * z.p.iter().map(|v| v * v).sum::<f64>();
    let h0 = energy(&z);
    let mut worst = 0.0f64;
    for _ in 0..n_steps {
        nuts.leapfrog(&mut z, step_size);
        worst = worst.max((energy(&z) - h0).abs());
    }
    worst
}
