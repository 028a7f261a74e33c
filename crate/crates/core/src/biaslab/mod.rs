//! Ablation experiments: fits with one or all group-specific parameter
//! blocks removed, per-group severity bias, the high-risk visit profile,
//! and the quadrature oracles in [`oracle`].

pub mod oracle;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use oracle::{
    latent_posterior_mean, latent_posterior_mean_closed_form, mlrp_bias_oracle, scenario_grid, visit_posterior_mean,
    visit_posterior_mean_dense, Comparison, LatentScenario, OracleOutcome, Scenario, Theorem, VisitScenario,
    EXPECTATION_TOLERANCE, QUADRATURE_TOLERANCE,
};

use crate::error::{Error, Result};
use crate::inference::{fit, latent_means, Fit, InitStrategy};
use crate::model::{Dataset, GroupParams, ModelStructure, PatientLatents, PriorSpec};
use crate::sampler::SamplerConfig;
use crate::simulate::Truth;
use crate::stats::{mean, pearson};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Full,
    NoInitialSeverityDisparity,
    NoRateDisparity,
    NoVisitDisparity,
    NoDisparities,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Full,
        ModelVariant::NoInitialSeverityDisparity,
        ModelVariant::NoRateDisparity,
        ModelVariant::NoVisitDisparity,
        ModelVariant::NoDisparities,
    ];

    /// The full model and the three single-disparity ablations.
    pub const TABLE: [ModelVariant; 4] = [
        ModelVariant::Full,
        ModelVariant::NoInitialSeverityDisparity,
        ModelVariant::NoRateDisparity,
        ModelVariant::NoVisitDisparity,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ModelVariant::Full => "full",
            ModelVariant::NoInitialSeverityDisparity => "no_initial_severity_disparity",
            ModelVariant::NoRateDisparity => "no_rate_disparity",
            ModelVariant::NoVisitDisparity => "no_visit_disparity",
            ModelVariant::NoDisparities => "no_disparities",
        }
    }

    /// Which group counts as underserved when scoring this variant: the
    /// group disadvantaged on the disparity it ignores (higher initial
    /// severity for the full model and the all-ablated model).
    pub fn underserved_group(self, groups: &[GroupParams]) -> usize {
        let argmax = |key: &dyn Fn(&GroupParams) -> f64| {
            (0..groups.len())
                .max_by(|&a, &b| key(&groups[a]).total_cmp(&key(&groups[b])))
                .unwrap_or(0)
        };
        match self {
            ModelVariant::Full | ModelVariant::NoInitialSeverityDisparity | ModelVariant::NoDisparities => {
                argmax(&|g| g.mu_z0)
            }
            ModelVariant::NoRateDisparity => argmax(&|g| g.mu_r),
            ModelVariant::NoVisitDisparity => argmax(&|g| -g.beta_a),
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.label() == key)
            .ok_or_else(|| Error::Config(format!("unknown model variant '{s}'")))
    }
}

/// Model structure of a variant.
pub fn build_variant(variant: ModelVariant, n_groups: usize, d: usize) -> ModelStructure {
    let mut s = ModelStructure::full(n_groups, d);
    let (initial, rate, visit) = match variant {
        ModelVariant::Full => (true, true, true),
        ModelVariant::NoInitialSeverityDisparity => (false, true, true),
        ModelVariant::NoRateDisparity => (true, false, true),
        ModelVariant::NoVisitDisparity => (true, true, false),
        ModelVariant::NoDisparities => (false, false, false),
    };
    s.initial_disparity = initial;
    s.rate_disparity = rate;
    s.visit_disparity = visit;
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupBias {
    pub group: usize,
    pub n_visits: usize,
    pub mean_true: f64,
    pub mean_estimated: f64,
    /// Mean estimated minus mean true severity.
    pub mean_error: f64,
    /// `None` when either side is constant.
    pub correlation: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub variant: ModelVariant,
    pub groups: Vec<GroupBias>,
    pub underserved: usize,
    pub max_rhat: Option<f64>,
    /// Set when the fit did not converge (R̂ above [`RHAT_FLAG`] on a global parameter).
    pub flagged: bool,
}

pub const RHAT_FLAG: f64 = 1.1;

impl BiasReport {
    pub fn group(&self, g: usize) -> Option<&GroupBias> {
        self.groups.iter().find(|b| b.group == g)
    }

    /// Negative error for the underserved group and positive for every other.
    pub fn sign_pattern_holds(&self) -> bool {
        self.groups.iter().all(|b| {
            if b.group == self.underserved {
                b.mean_error < 0.0
            } else {
                b.mean_error > 0.0
            }
        })
    }
}

/// Severity at every visit bin: (group, true, estimated).
pub fn visit_severities(data: &Dataset, truth: &[PatientLatents], estimate: &[PatientLatents]) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for (i, p) in data.patients.iter().enumerate() {
        for t in p.visit_bins() {
            let tau = t as f64 * data.delta;
            out.push((p.group.index, truth[i].severity(tau), estimate[i].severity(tau)));
        }
    }
    out
}

/// Per-group bias of estimated against true severity over all visits.
pub fn bias_report(
    variant: ModelVariant,
    data: &Dataset,
    truth: &Truth,
    estimate: &[PatientLatents],
    max_rhat: Option<f64>,
) -> Result<BiasReport> {
    if estimate.len() != data.patients.len() || truth.params.latents.len() != data.patients.len() {
        return Err(Error::Data("latents do not match the cohort".into()));
    }
    let rows = visit_severities(data, &truth.params.latents, estimate);
    let mut groups = Vec::new();
    for g in 0..data.n_groups {
        let (t, e): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.0 == g).map(|r| (r.1, r.2)).unzip();
        if t.is_empty() {
            continue;
        }
        let (mt, me) = (mean(&t), mean(&e));
        groups.push(GroupBias {
            group: g,
            n_visits: t.len(),
            mean_true: mt,
            mean_estimated: me,
            mean_error: me - mt,
            correlation: pearson(&t, &e),
        });
    }
    Ok(BiasReport {
        variant,
        groups,
        underserved: variant.underserved_group(&truth.params.groups),
        max_rhat,
        flagged: max_rhat.is_none_or(|r| !(r <= RHAT_FLAG)),
    })
}

/// Fits every variant to the same cohort and scores its severity bias.
/// Variant `k` samples with seed `cfg.seed + k`.
pub fn bias_experiment(
    data: &Dataset,
    truth: &Truth,
    variants: &[ModelVariant],
    priors: &PriorSpec,
    cfg: &SamplerConfig,
) -> Result<Vec<(BiasReport, Fit)>> {
    let mut out = Vec::with_capacity(variants.len());
    for (k, &v) in variants.iter().enumerate() {
        let structure = build_variant(v, data.n_groups, data.d);
        let cfg_k = SamplerConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.clone()
        };
        let f = fit(data, &structure, priors, &cfg_k, InitStrategy::DataDriven)?;
        let est = data
            .patients
            .iter()
            .map(|p| latent_means(&f.draws, &p.patient_id))
            .collect::<Result<Vec<_>>>()?;
        let rhat = f.max_global_rhat().ok();
        out.push((bias_report(v, data, truth, &est, rhat)?, f));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRisk {
    pub group: usize,
    pub n_visits: usize,
    pub n_flagged: usize,
    /// Flagged visits over the group's visits.
    pub flagged_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighRiskProfile {
    pub q: f64,
    /// `None` when every severity is equal.
    pub threshold: Option<f64>,
    pub degenerate: bool,
    pub groups: Vec<GroupRisk>,
}

/// Flags visits whose severity is strictly above the nearest-rank
/// `(1 - q)` quantile over all visits, so that about a fraction `q` (the
/// top `q`) is flagged, and reports each group's flagged fraction.
pub fn high_risk_profile(severities: &[(usize, f64)], q: f64) -> Result<HighRiskProfile> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config("q must lie in (0, 1)".into()));
    }
    if severities.iter().any(|s| !s.1.is_finite()) {
        return Err(Error::Data("non-finite severity".into()));
    }
    let n_groups = severities.iter().map(|s| s.0 + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; n_groups];
    for s in severities {
        counts[s.0] += 1;
    }
    let mut sorted: Vec<f64> = severities.iter().map(|s| s.1).collect();
    sorted.sort_by(f64::total_cmp);
    let degenerate = sorted.first() == sorted.last();
    let threshold = if sorted.is_empty() || degenerate {
        None
    } else {
        let rank = ((1.0 - q) * sorted.len() as f64).ceil() as usize;
        Some(sorted[rank.clamp(1, sorted.len()) - 1])
    };
    let mut flagged = vec![0usize; n_groups];
    if let Some(th) = threshold {
        for s in severities {
            if s.1 > th {
                flagged[s.0] += 1;
            }
        }
    }
    let groups = (0..n_groups)
        .filter(|&g| counts[g] > 0)
        .map(|g| GroupRisk {
            group: g,
            n_visits: counts[g],
            n_flagged: flagged[g],
            flagged_fraction: flagged[g] as f64 / counts[g] as f64,
        })
        .collect();
    Ok(HighRiskProfile {
        q,
        threshold,
        degenerate,
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_labels_round_trip() {
        for v in ModelVariant::ALL {
            assert_eq!(v.label().parse::<ModelVariant>().unwrap(), v);
        }
        assert!("bogus".parse::<ModelVariant>().is_err());
    }

    #[test]
    fn underserved_rules() {
        let a = GroupParams { mu_z0: 0.0, sigma_z0: 1.0, mu_r: 2.0, sigma_r: 0.1, beta_a: 0.0 };
        let b = GroupParams { mu_z0: 1.0, sigma_z0: 1.0, mu_r: 1.0, sigma_r: 0.1, beta_a: 0.5 };
        let gs = [a, b];
        assert_eq!(ModelVariant::Full.underserved_group(&gs), 1);
        assert_eq!(ModelVariant::NoRateDisparity.underserved_group(&gs), 0);
        assert_eq!(ModelVariant::NoVisitDisparity.underserved_group(&gs), 0);
    }

    #[test]
    fn all_equal_is_degenerate() {
        let p = high_risk_profile(&[(0, 1.0), (1, 1.0), (1, 1.0)], 0.25).unwrap();
        assert!(p.degenerate);
        assert!(p.groups.iter().all(|g| g.n_flagged == 0));
    }
}
