//! Prior families and the per-parameter prior settings.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{normal_ln_pdf, std_normal_ln_cdf};

/// A univariate prior. `sigma` is a standard deviation, never a variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Prior {
    Normal { mu: f64, sigma: f64 },
    /// Normal restricted to `[lower, ∞)` and renormalized.
    TruncatedNormal { mu: f64, sigma: f64, lower: f64 },
}

impl Prior {
    pub const fn normal(mu: f64, sigma: f64) -> Self {
        Prior::Normal { mu, sigma }
    }

    pub const fn truncated(mu: f64, sigma: f64, lower: f64) -> Self {
        Prior::TruncatedNormal { mu, sigma, lower }
    }

    pub fn mu(&self) -> f64 {
        match *self {
            Prior::Normal { mu, .. } | Prior::TruncatedNormal { mu, .. } => mu,
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            Prior::Normal { sigma, .. } | Prior::TruncatedNormal { sigma, .. } => sigma,
        }
    }

    pub fn lower(&self) -> Option<f64> {
        match *self {
            Prior::Normal { .. } => None,
            Prior::TruncatedNormal { lower, .. } => Some(lower),
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        let sigma = self.sigma();
        if !(sigma > 0.0) || !sigma.is_finite() || !self.mu().is_finite() {
            return Err(Error::Config(format!(
                "prior for `{name}` needs finite mu and sigma > 0 (got mu={}, sigma={sigma})",
                self.mu()
            )));
        }
        if let Some(lower) = self.lower() {
            if !lower.is_finite() {
                return Err(Error::Config(format!("prior for `{name}` has non-finite bound")));
            }
        }
        Ok(())
    }

    /// Log-density including the truncation normalizer.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Normal { mu, sigma } => normal_ln_pdf(x, mu, sigma),
            Prior::TruncatedNormal { mu, sigma, lower } => {
                if x < lower {
                    f64::NEG_INFINITY
                } else {
                    normal_ln_pdf(x, mu, sigma) - std_normal_ln_cdf((mu - lower) / sigma)
                }
            }
        }
    }

    /// Derivative of [`Prior::ln_pdf`] inside the support.
    #[inline]
    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        let (mu, sigma) = (self.mu(), self.sigma());
        -(x - mu) / (sigma * sigma)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Normal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mu + sigma * z
            }
            Prior::TruncatedNormal { mu, sigma, lower } => {
                let a = (lower - mu) / sigma;
                mu + sigma * sample_std_normal_above(a, rng)
            }
        }
    }
}

/// Draws from a standard normal conditioned on `z >= a`.
fn sample_std_normal_above<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a < 0.5 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z >= a {
                return z;
            }
        }
    }
    // Exponential proposal (Robert, 1995) for the far tail.
    let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e: f64 = Exp1.sample(rng);
        let z = a + e / lambda;
        let u: f64 = rng.random();
        if u <= (-0.5 * (z - lambda) * (z - lambda)).exp() {
            return z;
        }
    }
}

/// Priors for every sampled model parameter.
///
/// The loading prior is split into the sign-pinned first feature and the
/// rest; `loading_means`, when present, recentres the per-feature loading
/// priors (factor-analysis seeding) while keeping their family and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub loading_first: Prior,
    pub loading_rest: Prior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loading_means: Option<Vec<f64>>,
    pub intercept: Prior,
    pub noise_var: Prior,
    pub beta0: Prior,
    pub beta_z: Prior,
    pub mu_z0: Prior,
    pub sigma_z0: Prior,
    pub beta_a: Prior,
    pub mu_r: Prior,
    pub sigma_r: Prior,
}

impl PriorSpec {
    /// Generating distribution for synthetic cohorts.
    pub fn simulation() -> Self {
        PriorSpec {
            loading_first: Prior::truncated(1.0, 1.0, 0.5),
            loading_rest: Prior::normal(0.0, 2.0),
            loading_means: None,
            intercept: Prior::normal(0.0, 1.0),
            noise_var: Prior::truncated(5.0, 1.0, 0.0),
            beta0: Prior::normal(1.5, 0.1),
            beta_z: Prior::truncated(0.5, 0.1, 0.1),
            mu_z0: Prior::normal(0.0, 4.0),
            sigma_z0: Prior::truncated(1.0, 0.1, 0.0),
            beta_a: Prior::normal(0.0, 2.0),
            mu_r: Prior::normal(1.0, 4.0),
            sigma_r: Prior::truncated(0.1, 0.4, 0.0),
        }
    }

    /// Priors used when fitting synthetic cohorts: the generating priors,
    /// except that the first loading is only sign-constrained.
    pub fn synthetic_fit() -> Self {
        PriorSpec {
            loading_first: Prior::truncated(1.0, 1.0, 0.0),
            ..Self::simulation()
        }
    }

    /// Weakly informative priors for observational data.
    pub fn weakly_informative() -> Self {
        PriorSpec {
            loading_first: Prior::truncated(0.0, 1.0, 0.0),
            loading_rest: Prior::normal(0.0, 1.0),
            loading_means: None,
            intercept: Prior::normal(0.0, 1.0),
            noise_var: Prior::truncated(1.0, 0.5, 0.0),
            beta0: Prior::normal(2.5, 1.0),
            beta_z: Prior::normal(0.0, 1.0),
            mu_z0: Prior::normal(0.0, 1.0),
            sigma_z0: Prior::truncated(1.0, 1.0, 0.0),
            beta_a: Prior::normal(0.0, 1.0),
            mu_r: Prior::normal(0.0, 1.0),
            sigma_r: Prior::truncated(1.5, 1.0, 0.0),
        }
    }

    /// Recentres the loading priors on `means` (unit scale), as produced by
    /// a one-factor analysis of the reference group's first visits.
    pub fn with_loading_means(mut self, means: Vec<f64>) -> Self {
        self.loading_first = match self.loading_first {
            Prior::TruncatedNormal { lower, .. } => Prior::truncated(0.0, 1.0, lower),
            Prior::Normal { .. } => Prior::normal(0.0, 1.0),
        };
        self.loading_rest = Prior::normal(0.0, 1.0);
        self.loading_means = Some(means);
        self
    }

    /// Prior for loading `j`.
    pub fn loading(&self, j: usize) -> Prior {
        let base = if j == 0 { self.loading_first } else { self.loading_rest };
        match &self.loading_means {
            Some(means) => match base {
                Prior::Normal { sigma, .. } => Prior::normal(means[j], sigma),
                Prior::TruncatedNormal { sigma, lower, .. } => {
                    Prior::truncated(means[j], sigma, lower)
                }
            },
            None => base,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let named = [
            ("loading_first", self.loading_first),
            ("loading_rest", self.loading_rest),
            ("intercept", self.intercept),
            ("noise_var", self.noise_var),
            ("beta0", self.beta0),
            ("beta_z", self.beta_z),
            ("mu_z0", self.mu_z0),
            ("sigma_z0", self.sigma_z0),
            ("beta_a", self.beta_a),
            ("mu_r", self.mu_r),
            ("sigma_r", self.sigma_r),
        ];
        for (name, prior) in named {
            prior.validate(name)?;
        }
        if let Some(means) = &self.loading_means {
            if means.len() != d {
                return Err(Error::Config(format!(
                    "loading_means has {} entries for {d} features",
                    means.len()
                )));
            }
            if means.iter().any(|m| !m.is_finite()) {
                return Err(Error::Config("loading_means must be finite".into()));
            }
        }
        Ok(())
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::synthetic_fit()
    }
}
