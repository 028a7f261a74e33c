//! Quadrature checks of the direction of severity bias when a model ignores
//! a group disparity in initial severity, progression rate or visit rate.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_2d};
use crate::stats::normal_ln_pdf;

/// Absolute tolerance of every quadrature.
pub const QUADRATURE_TOLERANCE: f64 = 1e-8;
/// Expectations closer than this are treated as equal.
pub const EXPECTATION_TOLERANCE: f64 = 1e-6;
/// Half-width of each integration range, in standard deviations.
const RANGE_SDS: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    InitialSeverity,
    Rate,
    VisitFrequency,
}

impl Theorem {
    pub fn label(self) -> &'static str {
        match self {
            Theorem::InitialSeverity => "initial_severity",
            Theorem::Rate => "rate",
            Theorem::VisitFrequency => "visit_frequency",
        }
    }
}

/// Normal latents and one linear-Gaussian feature observed at time `t`.
/// The group differs from the population by `shift` in the mean of `Z_0`
/// (initial-severity case) or of `R` (rate case).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScenario {
    pub t: f64,
    pub mu_z0: f64,
    pub sd_z0: f64,
    pub mu_r: f64,
    pub sd_r: f64,
    pub loading: f64,
    pub noise_sd: f64,
    pub x_obs: f64,
    pub shift: f64,
}

/// Normal severity with visit probability `1 − exp(−exp(beta0 + betaZ z))`.
/// The group's curve is the population curve evaluated at `z − alpha`, so a
/// positive `alpha` means fewer visits at every severity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitScenario {
    pub mu: f64,
    pub sd: f64,
    pub beta0: f64,
    pub beta_z: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    Latent(LatentScenario),
    Visit(VisitScenario),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// What is conditioned on, e.g. `X_t = 0.5` or `E_t = 1`.
    pub condition: String,
    pub e_pop: f64,
    pub e_group: f64,
    /// Predicted sign of `e_group − e_pop`.
    pub predicted: i8,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub theorem: Theorem,
    pub scenario: Scenario,
    pub comparisons: Vec<Comparison>,
    pub holds: bool,
}

fn sign(x: f64) -> i8 {
    match x.partial_cmp(&0.0) {
        Some(Ordering::Greater) => 1,
        Some(Ordering::Less) => -1,
        _ => 0,
    }
}

fn compare(condition: String, e_pop: f64, e_group: f64, predicted: i8) -> Comparison {
    let diff = e_group - e_pop;
    let holds = match predicted {
        0 => diff.abs() <= EXPECTATION_TOLERANCE,
        s => diff.abs() > EXPECTATION_TOLERANCE && sign(diff) == s,
    };
    Comparison {
        condition,
        e_pop,
        e_group,
        predicted,
        holds,
    }
}

/// `E[Z_t | X_t = x]` by 2-D quadrature over `(Z_0, R)` under the given
/// latent means.
pub fn latent_posterior_mean(s: &LatentScenario, mu_z0: f64, mu_r: f64) -> Result<f64> {
    let zr = (mu_z0 - RANGE_SDS * s.sd_z0, mu_z0 + RANGE_SDS * s.sd_z0);
    let rr = (mu_r - RANGE_SDS * s.sd_r, mu_r + RANGE_SDS * s.sd_r);
    let weight = |z0: f64, r: f64| {
        let z = z0 + r * s.t;
        let u = (s.x_obs - s.loading * z) / s.noise_sd;
        (normal_ln_pdf(z0, mu_z0, s.sd_z0) + normal_ln_pdf(r, mu_r, s.sd_r) - 0.5 * u * u).exp()
    };
    let den = integrate_2d(&mut |a, b| weight(a, b), zr, rr, QUADRATURE_TOLERANCE)?;
    let num = integrate_2d(&mut |a, b| (a + b * s.t) * weight(a, b), zr, rr, QUADRATURE_TOLERANCE)?;
    if !(den.value > 0.0) {
        return Err(Error::Precision {
            tolerance: QUADRATURE_TOLERANCE,
            estimate: den.error,
        });
    }
    Ok(num.value / den.value)
}

/// Gaussian-conjugate closed form of [`latent_posterior_mean`].
pub fn latent_posterior_mean_closed_form(s: &LatentScenario, mu_z0: f64, mu_r: f64) -> f64 {
    let m = mu_z0 + mu_r * s.t;
    let v = s.sd_z0 * s.sd_z0 + s.sd_r * s.sd_r * s.t * s.t;
    let gain = s.loading * v / (s.loading * s.loading * v + s.noise_sd * s.noise_sd);
    m + gain * (s.x_obs - s.loading * m)
}

/// Visit probability within one bin at log-rate `eta`, and its complement.
fn visit_probs(eta: f64) -> (f64, f64) {
    let y = eta.exp();
    (-(-y).exp_m1(), (-y).exp())
}

/// `E[Z | E = visit]` for severity `N(mu, sd)` with the visit curve shifted by `alpha`.
pub fn visit_posterior_mean(s: &VisitScenario, alpha: f64, visit: bool) -> Result<f64> {
    let (lo, hi) = (s.mu - RANGE_SDS * s.sd, s.mu + RANGE_SDS * s.sd);
    let weight = |z: f64| {
        let (p1, p0) = visit_probs(s.beta0 + s.beta_z * (z - alpha));
        normal_ln_pdf(z, s.mu, s.sd).exp() * if visit { p1 } else { p0 }
    };
    let den = integrate(&mut |z| weight(z), lo, hi, QUADRATURE_TOLERANCE)?;
    let num = integrate(&mut |z| z * weight(z), lo, hi, QUADRATURE_TOLERANCE)?;
    if !(den.value > 0.0) {
        return Err(Error::Precision {
            tolerance: QUADRATURE_TOLERANCE,
            estimate: den.error,
        });
    }
    Ok(num.value / den.value)
}

/// [`visit_posterior_mean`] by a fixed composite Simpson rule over ±12 sd.
pub fn visit_posterior_mean_dense(s: &VisitScenario, alpha: f64, visit: bool, panels: usize) -> f64 {
    let panels = panels + panels % 2;
    let (lo, hi) = (s.mu - 12.0 * s.sd, s.mu + 12.0 * s.sd);
    let h = (hi - lo) / panels as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=panels {
        let z = lo + i as f64 * h;
        let w = if i == 0 || i == panels { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let (p1, p0) = visit_probs(s.beta0 + s.beta_z * (z - alpha));
        let d = (-0.5 * ((z - s.mu) / s.sd).powi(2)).exp() * if visit { p1 } else { p0 };
        num += w * z * d;
        den += w * d;
    }
    num / den
}

/// Evaluates one scenario and checks the predicted ordering of the
/// group-aware and group-blind posterior means.
pub fn mlrp_bias_oracle(theorem: Theorem, scenario: &Scenario) -> Result<OracleOutcome> {
    let comparisons = match (theorem, scenario) {
        (Theorem::InitialSeverity | Theorem::Rate, Scenario::Latent(s)) => {
            if !(s.sd_z0 > 0.0 && s.sd_r > 0.0 && s.noise_sd > 0.0) {
                return Err(Error::Config("scenario scales must be positive".into()));
            }
            if theorem == Theorem::Rate && !(s.t > 0.0) {
                return Err(Error::Config("a rate disparity is only visible at t > 0".into()));
            }
            let e_pop = latent_posterior_mean(s, s.mu_z0, s.mu_r)?;
            let e_group = match theorem {
                Theorem::InitialSeverity => latent_posterior_mean(s, s.mu_z0 + s.shift, s.mu_r)?,
                _ => latent_posterior_mean(s, s.mu_z0, s.mu_r + s.shift)?,
            };
            vec![compare(format!("X_t = {}", s.x_obs), e_pop, e_group, sign(s.shift))]
        }
        (Theorem::VisitFrequency, Scenario::Visit(s)) => {
            if !(s.sd > 0.0 && s.beta_z > 0.0) {
                return Err(Error::Config("visit scenario needs sd > 0 and betaZ > 0".into()));
            }
            let mut out = Vec::new();
            for visit in [true, false] {
                let e_pop = visit_posterior_mean(s, 0.0, visit)?;
                let e_group = visit_posterior_mean(s, s.alpha, visit)?;
                out.push(compare(format!("E_t = {}", u8::from(visit)), e_pop, e_group, sign(s.alpha)));
            }
            out
        }
        _ => {
            return Err(Error::Config(format!(
                "scenario kind does not match theorem {}",
                theorem.label()
            )))
        }
    };
    let holds = comparisons.iter().all(|c| c.holds);
    Ok(OracleOutcome {
        theorem,
        scenario: *scenario,
        comparisons,
        holds,
    })
}

/// Scenario grid for one theorem: shift magnitudes 0.1–3.0, noise (or
/// severity) scales 0.25–4.0, both shift directions.
pub fn scenario_grid(theorem: Theorem) -> Vec<Scenario> {
    let shifts = [0.1, 0.5, 1.0, 2.0, 3.0];
    let scales = [0.25, 1.0, 4.0];
    let mut out = Vec::new();
    for (i, &m) in shifts.iter().enumerate() {
        for (k, &scale) in scales.iter().enumerate() {
            for dir in [1.0, -1.0] {
                let shift = dir * m;
                let s = match theorem {
                    Theorem::InitialSeverity | Theorem::Rate => Scenario::Latent(LatentScenario {
                        t: if theorem == Theorem::Rate { [0.5, 1.0][i % 2] } else { [0.0, 0.5][k % 2] },
                        mu_z0: 0.0,
                        sd_z0: 1.0,
                        mu_r: 1.0,
                        sd_r: 0.5,
                        loading: 1.0,
                        noise_sd: scale,
                        x_obs: [-0.5, 0.0, 1.0][(i + k) % 3],
                        shift,
                    }),
                    Theorem::VisitFrequency => Scenario::Visit(VisitScenario {
                        mu: 0.0,
                        sd: scale,
                        beta0: [-1.0, 0.0, 0.5][(i + k) % 3],
                        beta_z: [0.5, 1.0][i % 2],
                        alpha: shift,
                    }),
                };
                out.push(s);
            }
        }
    }
    out
}
