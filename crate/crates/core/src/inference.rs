//! Post-processing of posterior draws: severity estimates, recovery and
//! calibration statistics, disparity magnitudes and patient-level cluster
//! bootstrap intervals. Also the model-fitting entry point with its
//! data-driven starting point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::fa_fit;
use crate::error::{Error, Result};
use crate::model::{
    log_lik_visits, Dataset, GroupParams, ModelStructure, ParameterVector, PatientLatents, Posterior, PriorSpec,
    SharedParams, REFERENCE_GROUP,
};
use crate::sampler::{sample_with_inits, PosteriorDraws, SamplerConfig};
use crate::stats::{equal_tailed_interval, mean, pearson, slope_through_origin, variance};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityEstimate {
    pub mean: f64,
    pub sd: f64,
}

fn latent_columns(draws: &PosteriorDraws, patient_id: &str) -> Result<(usize, usize)> {
    let z = draws.index_of(&format!("z0[{patient_id}]"));
    let r = draws.index_of(&format!("r[{patient_id}]"));
    match (z, r) {
        (Ok(z), Ok(r)) => Ok((z, r)),
        _ => Err(Error::UnknownPatient(patient_id.to_string())),
    }
}

/// Posterior mean and sd of `Z_t = z0 + r * t * delta` for one patient.
pub fn severity_estimate(draws: &PosteriorDraws, patient_id: &str, t: f64, delta: f64) -> Result<SeverityEstimate> {
    let (kz, kr) = latent_columns(draws, patient_id)?;
    let tau = t * delta;
    let zs: Vec<f64> = draws.values.iter().map(|row| row[kz] + row[kr] * tau).collect();
    if zs.is_empty() {
        return Err(Error::Data("no posterior draws".into()));
    }
    let sd = if zs.len() > 1 { variance(&zs).sqrt() } else { 0.0 };
    Ok(SeverityEstimate { mean: mean(&zs), sd })
}

/// Posterior means of `z0` and `r` for one patient.
pub fn latent_means(draws: &PosteriorDraws, patient_id: &str) -> Result<PatientLatents> {
    let (kz, kr) = latent_columns(draws, patient_id)?;
    let n = draws.len() as f64;
    let (mut z, mut r) = (0.0, 0.0);
    for row in &draws.values {
        z += row[kz];
        r += row[kr];
    }
    Ok(PatientLatents { z0: z / n, r: r / n })
}

/// Posterior mean of every recorded column.
pub fn posterior_means(draws: &PosteriorDraws) -> BTreeMap<String, f64> {
    let n = draws.len() as f64;
    let mut sums = vec![0.0; draws.names.len()];
    for row in &draws.values {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    draws.names.iter().cloned().zip(sums.into_iter().map(|s| s / n)).collect()
}

/// True and estimated values of one trial.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrialEstimate {
    pub truth: BTreeMap<String, f64>,
    pub estimate: BTreeMap<String, f64>,
    /// Per group: (group, mean true severity, mean estimated severity).
    pub group_severity: Vec<(usize, f64, f64)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterRecovery {
    pub name: String,
    pub n_trials: usize,
    /// `None` when either side has zero variance across trials.
    pub pearson_r: Option<f64>,
    pub slope: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub parameters: Vec<ParameterRecovery>,
    pub mean_pearson_r: Option<f64>,
    pub median_pearson_r: Option<f64>,
    pub mean_slope: Option<f64>,
    pub severity_pearson_r: Option<f64>,
    pub severity_slope: Option<f64>,
    /// (true, estimated) group-mean severity pairs over all trials.
    pub severity_points: Vec<(f64, f64)>,
}

fn mean_of_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Correlation and no-intercept slope of estimate on truth for every
/// parameter named in both maps of at least two trials.
pub fn recovery_report(trials: &[TrialEstimate]) -> Result<RecoveryReport> {
    if trials.len() < 2 {
        return Err(Error::Data("recovery needs at least two trials".into()));
    }
    let mut pairs: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for tr in trials {
        for (name, est) in &tr.estimate {
            if let Some(t) = tr.truth.get(name) {
                let e = pairs.entry(name).or_default();
                e.0.push(*t);
                e.1.push(*est);
            }
        }
    }
    let parameters: Vec<ParameterRecovery> = pairs
        .into_iter()
        .filter(|(_, (t, _))| t.len() >= 2)
        .map(|(name, (t, e))| ParameterRecovery {
            name: name.to_string(),
            n_trials: t.len(),
            pearson_r: pearson(&t, &e),
            slope: slope_through_origin(&t, &e),
        })
        .collect();
    let mut rs: Vec<f64> = parameters.iter().filter_map(|p| p.pearson_r).collect();
    rs.sort_by(f64::total_cmp);
    let median = (!rs.is_empty()).then(|| {
        let m = rs.len() / 2;
        if rs.len() % 2 == 1 {
            rs[m]
        } else {
            0.5 * (rs[m - 1] + rs[m])
        }
    });
    let severity_points: Vec<(f64, f64)> = trials
        .iter()
        .flat_map(|t| t.group_severity.iter().map(|&(_, a, b)| (a, b)))
        .collect();
    let (st, se): (Vec<f64>, Vec<f64>) = severity_points.iter().copied().unzip();
    Ok(RecoveryReport {
        mean_pearson_r: mean_of_defined(parameters.iter().map(|p| p.pearson_r)),
        median_pearson_r: median,
        mean_slope: mean_of_defined(parameters.iter().map(|p| p.slope)),
        parameters,
        severity_pearson_r: pearson(&st, &se),
        severity_slope: slope_through_origin(&st, &se),
        severity_points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    fn of(values: &[f64]) -> Self {
        let (lower, upper) = equal_tailed_interval(values, 0.95);
        Interval {
            mean: mean(values),
            lower,
            upper,
        }
    }
}

/// Rates at or below this magnitude make the delay conversion undefined.
pub const MIN_RATE: f64 = 1e-9;

/// Time by which a severity gap corresponds to later presentation when
/// everyone progresses at `mean_rate`, in model time units.
pub fn care_delay_units(delta_mu_z0: f64, mean_rate: f64) -> Option<f64> {
    (mean_rate.abs() > MIN_RATE).then(|| delta_mu_z0 / mean_rate)
}

/// [`care_delay_units`] converted to years.
pub fn care_delay_years(delta_mu_z0: f64, mean_rate: f64, years_per_unit: f64) -> Option<f64> {
    care_delay_units(delta_mu_z0, mean_rate).map(|u| u * years_per_unit)
}

/// Visit-rate multiplier of a group relative to the reference.
pub fn rate_ratio(beta_a: f64) -> f64 {
    beta_a.exp()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupDisparity {
    pub group: usize,
    /// `muZ0[g] - muZ0[reference]`; absent when the fit has no initial disparity.
    pub delta_mu_z0: Option<Interval>,
    pub care_delay_units: Option<f64>,
    pub care_delay_years: Option<f64>,
    /// `exp(betaA[g])` over draws; absent when the fit has no visit disparity.
    pub rate_ratio: Option<Interval>,
    /// `exp` of the posterior mean of `betaA[g]`.
    pub rate_ratio_at_mean: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DisparitySummary {
    /// Average over groups of the posterior-mean progression rates.
    pub mean_rate: f64,
    pub years_per_unit: f64,
    pub groups: Vec<GroupDisparity>,
}

/// Group disparities relative to the reference group, with 95%
/// equal-tailed posterior intervals.
pub fn disparity_summary(draws: &PosteriorDraws, n_groups: usize, years_per_unit: f64) -> Result<DisparitySummary> {
    if n_groups < 2 {
        return Err(Error::Config("disparities need at least two groups".into()));
    }
    if !(years_per_unit > 0.0) {
        return Err(Error::Config("years per unit must be positive".into()));
    }
    let rate_means: Vec<f64> = if draws.has("muR") {
        vec![draws.mean("muR")?]
    } else {
        (0..n_groups).map(|g| draws.mean(&format!("muR[{g}]"))).collect::<Result<_>>()?
    };
    let mean_rate = mean(&rate_means);
    let mut groups = Vec::new();
    for g in (0..n_groups).filter(|&g| g != REFERENCE_GROUP) {
        let mu_name = format!("muZ0[{g}]");
        let delta_mu_z0 = if draws.has(&mu_name) {
            // The reference mean is pinned at zero.
            Some(Interval::of(&draws.column(&mu_name)?))
        } else {
            None
        };
        let ba_name = format!("betaA[{g}]");
        let (ratio, at_mean) = if draws.has(&ba_name) {
            let col = draws.column(&ba_name)?;
            let ratios: Vec<f64> = col.iter().map(|&b| rate_ratio(b)).collect();
            (Some(Interval::of(&ratios)), Some(rate_ratio(mean(&col))))
        } else {
            (None, None)
        };
        let dm = delta_mu_z0.map(|i| i.mean);
        groups.push(GroupDisparity {
            group: g,
            delta_mu_z0,
            care_delay_units: dm.and_then(|d| care_delay_units(d, mean_rate)),
            care_delay_years: dm.and_then(|d| care_delay_years(d, mean_rate, years_per_unit)),
            rate_ratio: ratio,
            rate_ratio_at_mean: at_mean,
        });
    }
    Ok(DisparitySummary {
        mean_rate,
        years_per_unit,
        groups,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    /// Replicates where the statistic was undefined.
    pub dropped: usize,
}

pub const MIN_BOOTSTRAP: usize = 100;

/// Percentile interval of `statistic` over patient-level resamples. The
/// statistic receives the resampled patient indices (with repeats) and
/// returns `None` when undefined on that replicate.
pub fn cluster_bootstrap<F>(statistic: F, n_patients: usize, n_boot: usize, seed: u64) -> Result<BootstrapInterval>
where
    F: Fn(&[usize]) -> Option<f64>,
{
    if n_boot < MIN_BOOTSTRAP {
        return Err(Error::Config(format!("n_boot must be at least {MIN_BOOTSTRAP}")));
    }
    if n_patients == 0 {
        return Err(Error::Data("no patients to resample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n_patients];
    let mut values = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n_patients);
        }
        if let Some(s) = statistic(&idx).filter(|s| s.is_finite()) {
            values.push(s);
        }
    }
    if values.is_empty() {
        return Err(Error::Diagnostic("statistic undefined on every bootstrap replicate".into()));
    }
    let (lower, upper) = equal_tailed_interval(&values, 0.95);
    Ok(BootstrapInterval {
        lower,
        upper,
        replicates: values.len(),
        dropped: n_boot - values.len(),
    })
}

/// Weakly informative priors with the loading priors centred on a
/// one-factor analysis of the reference group's first-visit features.
pub fn fa_seeded_priors(data: &Dataset) -> Result<PriorSpec> {
    let rows: Vec<Vec<Option<f64>>> = data
        .patients
        .iter()
        .filter(|p| p.group.index == REFERENCE_GROUP)
        .map(|p| p.features[0].clone())
        .collect();
    if rows.len() < 2 {
        return Err(Error::Data("reference group needs at least two patients".into()));
    }
    let fa = fa_fit(&rows, 1)?;
    let mut means: Vec<f64> = fa.loadings.column(0).iter().copied().collect();
    if means[0] < 0.0 {
        means.iter_mut().for_each(|m| *m = -*m);
    }
    Ok(PriorSpec::weakly_informative().with_loading_means(means))
}

/// Maximizes `f` by Newton steps on finite-difference derivatives with
/// step halving.
fn newton_maximize(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>, iters: usize) -> Vec<f64> {
    let k = x0.len();
    let h = 1e-4;
    let mut x = x0;
    let mut fx = f(&x);
    for _ in 0..iters {
        let mut g = nalgebra::DVector::zeros(k);
        let mut hess = nalgebra::DMatrix::zeros(k, k);
        let at = |x: &[f64], i: usize, di: f64, j: usize, dj: f64| {
            let mut y = x.to_vec();
            y[i] += di;
            y[j] += dj;
            f(&y)
        };
        for i in 0..k {
            let (fp, fm) = (at(&x, i, h, i, 0.0), at(&x, i, -h, i, 0.0));
            g[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
            for j in 0..i {
                let v = (at(&x, i, h, j, h) - at(&x, i, h, j, -h) - at(&x, i, -h, j, h) + at(&x, i, -h, j, -h)) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        let step = match (-&hess).cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone() * 1e-3,
        };
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let y: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + scale * s).collect();
            let fy = f(&y);
            if fy.is_finite() && fy >= fx {
                moved = fy - fx > 1e-10;
                x = y;
                fx = fy;
                break;
            }
            scale *= 0.5;
        }
        if !moved {
            break;
        }
    }
    x
}

/// A rough constrained-space estimate of every parameter, used to start
/// the sampler: one-factor analysis of the reference group's first visits
/// for `F`, `b`, `psi`; per-visit severity scores regressed on time for
/// each patient; group moments of those; and the visit coefficients
/// maximized with latents held fixed.
pub fn initial_estimate(data: &Dataset, structure: &ModelStructure) -> Result<ParameterVector> {
    data.validate()?;
    let d = data.d;
    let first_rows = |reference_only: bool| -> Vec<Vec<Option<f64>>> {
        data.patients
            .iter()
            .filter(|p| !reference_only || p.group.index == REFERENCE_GROUP)
            .map(|p| p.features[0].clone())
            .collect()
    };
    let mut rows = first_rows(true);
    if rows.len() < d + 2 {
        rows = first_rows(false);
    }
    let fa = fa_fit(&rows, 1)?;
    let mut loadings: Vec<f64> = fa.loadings.column(0).iter().copied().collect();
    if loadings[0] < 0.0 {
        loadings.iter_mut().for_each(|f| *f = -*f);
    }
    let intercepts = fa.means.clone();
    let noise_var = fa.uniquenesses.clone();

    // Per-patient least squares of visit scores on time, with the
    // sampling variance of the slope.
    let tau = |t: usize| t as f64 * data.delta;
    let mut z0s = Vec::with_capacity(data.patients.len());
    let mut slopes: Vec<Option<(f64, f64)>> = Vec::with_capacity(data.patients.len());
    for p in &data.patients {
        let mut pts = Vec::new();
        for t in p.visit_bins() {
            let (mut num, mut prec) = (0.0, 0.0);
            for (j, v) in p.features[t].iter().enumerate() {
                if let Some(x) = v {
                    num += loadings[j] * (x - intercepts[j]) / noise_var[j];
                    prec += loadings[j] * loadings[j] / noise_var[j];
                }
            }
            if prec > 0.0 {
                pts.push((tau(t), num / prec, 1.0 / prec));
            }
        }
        let n = pts.len() as f64;
        let tm = pts.iter().map(|q| q.0).sum::<f64>() / n;
        let zm = pts.iter().map(|q| q.1).sum::<f64>() / n;
        let stt: f64 = pts.iter().map(|q| (q.0 - tm).powi(2)).sum();
        if pts.len() >= 2 && stt > 0.0 {
            let slope = pts.iter().map(|q| (q.0 - tm) * (q.1 - zm)).sum::<f64>() / stt;
            let noise = pts.iter().map(|q| q.2).sum::<f64>() / n;
            z0s.push(zm - slope * tm);
            slopes.push(Some((slope, noise / stt)));
        } else {
            z0s.push(if pts.is_empty() { 0.0 } else { zm });
            slopes.push(None);
        }
    }

    let n_groups = structure.n_groups;
    let members = |g: usize| -> Vec<usize> {
        (0..data.patients.len())
            .filter(|&i| !structure.rate_disparity || data.patients[i].group.index == g)
            .collect()
    };
    let mut groups = Vec::with_capacity(n_groups);
    for g in 0..n_groups {
        let own: Vec<f64> = (0..data.patients.len())
            .filter(|&i| data.patients[i].group.index == g)
            .map(|i| z0s[i])
            .collect();
        let (mu_z0, sigma_z0) = if g == REFERENCE_GROUP || !structure.initial_disparity || own.len() < 2 {
            (0.0, 1.0)
        } else {
            (mean(&own), variance(&own).sqrt().max(0.1))
        };
        let rates: Vec<(f64, f64)> = members(g).into_iter().filter_map(|i| slopes[i]).collect();
        let (mu_r, sigma_r) = if rates.len() >= 2 {
            let r: Vec<f64> = rates.iter().map(|q| q.0).collect();
            let noise = rates.iter().map(|q| q.1).sum::<f64>() / rates.len() as f64;
            (mean(&r), (variance(&r) - noise).max(0.01).sqrt())
        } else {
            (0.0, 0.5)
        };
        groups.push(GroupParams {
            mu_z0,
            sigma_z0,
            mu_r,
            sigma_r,
            beta_a: 0.0,
        });
    }
    let latents: Vec<PatientLatents> = data
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let g = &groups[p.group.index];
            let r = match slopes[i] {
                Some((s, v)) => {
                    let w = g.sigma_r * g.sigma_r / (g.sigma_r * g.sigma_r + v);
                    g.mu_r + w * (s - g.mu_r)
                }
                None => g.mu_r,
            };
            PatientLatents { z0: z0s[i], r }
        })
        .collect();

    // Visit coefficients with latents fixed.
    let n_bins: usize = data.patients.iter().map(|p| p.horizon().saturating_sub(1)).sum();
    let n_vis: usize = data.patients.iter().map(|p| p.visit_bins().filter(|&t| t > 0).count()).sum();
    let freq = ((n_vis as f64 + 0.5) / (n_bins as f64 + 1.0)).min(0.999);
    let zbar = mean(&latents.iter().map(|l| l.z0).collect::<Vec<_>>());
    let free_a: Vec<usize> = if structure.visit_disparity {
        (0..n_groups).filter(|&g| g != REFERENCE_GROUP).collect()
    } else {
        Vec::new()
    };
    let beta_z0 = 0.5;
    let mut x0 = vec![(-(1.0 - freq).ln() / data.delta).ln() - beta_z0 * zbar, beta_z0];
    x0.extend(free_a.iter().map(|_| 0.0));
    let mut shared = SharedParams {
        loadings,
        intercepts,
        noise_var,
        beta0: x0[0],
        beta_z: x0[1],
    };
    let objective = |x: &[f64]| {
        let sh = SharedParams {
            beta0: x[0],
            beta_z: x[1],
            ..shared.clone()
        };
        let mut gs = groups.clone();
        for (k, &g) in free_a.iter().enumerate() {
            gs[g].beta_a = x[2 + k];
        }
        log_lik_visits(&sh, &gs, &latents, data).unwrap_or(f64::NEG_INFINITY)
    };
    let x = newton_maximize(&objective, x0, 50);
    shared.beta0 = x[0];
    shared.beta_z = x[1];
    for (k, &g) in free_a.iter().enumerate() {
        groups[g].beta_a = x[2 + k];
    }
    Ok(ParameterVector {
        shared,
        groups,
        latents,
    })
}

/// One unconstrained starting point per chain: the estimate moved inside
/// the support, plus independent uniform jitter of half-width `jitter`.
pub fn chain_inits(post: &Posterior, estimate: &ParameterVector, chains: usize, jitter: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    let layout = post.layout();
    let mut est = estimate.clone();
    layout.clamp_to_support(&mut est, 0.05);
    let base = layout.unconstrain(&est)?;
    let mut out = Vec::with_capacity(chains);
    for c in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + c as u64);
        let mut found = None;
        for _ in 0..50 {
            let theta: Vec<f64> = base.iter().map(|u| u + jitter * rng.random_range(-1.0..1.0)).collect();
            if post.log_density(&theta).is_finite() {
                found = Some(theta);
                break;
            }
        }
        out.push(found.ok_or_else(|| Error::Sampler("no finite jittered starting point".into()))?);
    }
    Ok(out)
}

/// How chains are started.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Jittered [`initial_estimate`].
    #[default]
    DataDriven,
    /// Independent prior draws.
    Prior,
}

/// Half-width of the per-chain jitter around the data-driven start.
pub const INIT_JITTER: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Fit {
    pub structure: ModelStructure,
    pub draws: PosteriorDraws,
    pub n_global: usize,
}

impl Fit {
    /// Largest split R̂ over the global parameters (pinned ones are absent).
    pub fn max_global_rhat(&self) -> Result<f64> {
        let mut worst = 1.0f64;
        for k in 0..self.n_global {
            let r = crate::sampler::rhat(&self.draws.chains_at(k))?;
            worst = if r.is_nan() { f64::INFINITY } else { worst.max(r) };
        }
        Ok(worst)
    }

    pub fn global_names(&self) -> &[String] {
        &self.draws.names[..self.n_global]
    }
}

/// Fits the model to `data` with the sampler.
pub fn fit(
    data: &Dataset,
    structure: &ModelStructure,
    priors: &PriorSpec,
    cfg: &SamplerConfig,
    init: InitStrategy,
) -> Result<Fit> {
    let post = Posterior::new(structure, data, priors)?;
    let draws = match init {
        InitStrategy::DataDriven => {
            let est = initial_estimate(data, structure)?;
            let inits = chain_inits(&post, &est, cfg.chains, INIT_JITTER, cfg.seed)?;
            sample_with_inits(&post, cfg, &inits)?
        }
        InitStrategy::Prior => crate::sampler::sample(&post, cfg, None)?,
    };
    Ok(Fit {
        structure: structure.clone(),
        n_global: post.layout().n_global(),
        draws,
    })
}
