//! Joint log-density of the model and its analytic gradient.
//!
//! Emission terms are evaluated from per-patient, per-feature sufficient
//! statistics of the observed cells, and the visit term uses closed-form
//! geometric sums over the non-visit bins, so one evaluation costs
//! `O(patients · d + visits)` rather than `O(patients · bins · d)`.

use rand::Rng;

use super::layout::{Layout, ModelStructure, Slot, Transform};
use super::prior::{Prior, PriorSpec};
use super::types::{Dataset, GroupParams, ParameterVector, PatientLatents, SharedParams};
use crate::error::{Error, Result};
use crate::stats::{normal_ln_pdf, LN_2PI};

/// Log visit-rate above which the density is reported as `-inf`.
pub const MAX_LOG_RATE: f64 = 30.0;

/// Sufficient statistics of one patient's observed cells for one feature,
/// with `tau = t · delta`.
#[derive(Clone, Copy, Debug, Default)]
struct CellStats {
    n: f64,
    s1: f64,
    s2: f64,
    x0: f64,
    x1: f64,
    xx: f64,
}

#[derive(Clone, Debug)]
struct PreparedPatient {
    group: usize,
    /// Bins `1..=n_bins` enter the visit likelihood.
    n_bins: usize,
    /// Visit bins among them.
    visit_bins: Vec<i32>,
    /// `(feature, stats)` for every feature with at least one observation.
    cells: Vec<(usize, CellStats)>,
}

/// Dataset reduced to what the likelihood needs.
#[derive(Clone, Debug)]
pub struct PreparedData {
    patients: Vec<PreparedPatient>,
    delta: f64,
}

impl PreparedData {
    pub fn new(data: &Dataset) -> Result<Self> {
        data.validate()?;
        let patients = data
            .patients
            .iter()
            .map(|p| {
                let mut stats = vec![CellStats::default(); data.d];
                for (t, row) in p.features.iter().enumerate() {
                    let tau = t as f64 * data.delta;
                    for (j, x) in row.iter().enumerate() {
                        if let Some(x) = *x {
                            let s = &mut stats[j];
                            s.n += 1.0;
                            s.s1 += tau;
                            s.s2 += tau * tau;
                            s.x0 += x;
                            s.x1 += x * tau;
                            s.xx += x * x;
                        }
                    }
                }
                PreparedPatient {
                    group: p.group.index,
                    n_bins: p.horizon().saturating_sub(1),
                    visit_bins: p.visit_bins().filter(|&t| t > 0).map(|t| t as i32).collect(),
                    cells: stats.into_iter().enumerate().filter(|(_, s)| s.n > 0.0).collect(),
                }
            })
            .collect();
        Ok(PreparedData {
            patients,
            delta: data.delta,
        })
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }
}

/// `G = Σ_{t=1}^{n} e^{a+bt}` and `H = Σ_{t=1}^{n} t e^{a+bt}`.
fn geometric_sums(a: f64, b: f64, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    if b.abs() < 1e-4 {
        let (mut g, mut h) = (0.0, 0.0);
        for t in 1..=n {
            let e = (a + b * t as f64).exp();
            g += e;
            h += t as f64 * e;
        }
        return (g, h);
    }
    let nf = n as f64;
    let ln_ratio = if b > 0.0 {
        b + nf * b + (-(-nf * b).exp_m1()).ln() - b.exp_m1().ln()
    } else {
        b + (-(nf * b).exp_m1()).ln() - (-b.exp_m1()).ln()
    };
    let g = (a + ln_ratio).exp();
    let h = g * (1.0 + nf / -(-nf * b).exp_m1() - 1.0 / -(-b).exp_m1());
    (g, h)
}

/// Visit log-likelihood of one patient and its derivatives with respect to
/// the intercept `a` and per-bin slope `b` of the log-rate.
fn patient_visits(p: &PreparedPatient, a: f64, b: f64, delta: f64) -> Option<(f64, f64, f64)> {
    if p.n_bins == 0 {
        return Some((0.0, 0.0, 0.0));
    }
    let n = p.n_bins as f64;
    if (a + b).max(a + b * n) > MAX_LOG_RATE {
        return None;
    }
    let (g, h) = geometric_sums(a, b, p.n_bins);
    let mut ll = -delta * g;
    let mut da = -delta * g;
    let mut db = -delta * h;
    let scale = delta * a.exp();
    let growth = b.exp();
    for &t in &p.visit_bins {
        let y = scale * growth.powi(t);
        // d/dη of ln(1 − e^{−y}) + y, with y = Δe^η
        let (term, w) = if y > 30.0 {
            let tail = (-y).exp();
            (y + (-tail).ln_1p(), y / (1.0 - tail))
        } else {
            let em = y.exp_m1();
            (em.ln(), y * (1.0 + em) / em)
        };
        ll += term;
        da += w;
        db += w * t as f64;
    }
    Some((ll, da, db))
}

/// Constrained-space gradient accumulator.
#[derive(Clone, Debug)]
struct Grad {
    loadings: Vec<f64>,
    intercepts: Vec<f64>,
    noise_var: Vec<f64>,
    beta0: f64,
    beta_z: f64,
    /// Per group: `[muZ0, sigmaZ0, muR, sigmaR, betaA]`.
    groups: Vec<[f64; 5]>,
}

impl Grad {
    fn zeros(d: usize, n_groups: usize) -> Self {
        Grad {
            loadings: vec![0.0; d],
            intercepts: vec![0.0; d],
            noise_var: vec![0.0; d],
            beta0: 0.0,
            beta_z: 0.0,
            groups: vec![[0.0; 5]; n_groups],
        }
    }
}

/// Log-density split into its parts, all evaluated at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DensityComponents {
    pub emission: f64,
    pub visits: f64,
    pub prior: f64,
    pub log_jacobian: f64,
}

impl DensityComponents {
    pub fn total(&self) -> f64 {
        self.emission + self.visits + self.prior + self.log_jacobian
    }
}

/// Prior attached to a non-latent slot.
pub fn slot_prior(priors: &PriorSpec, slot: Slot) -> Option<Prior> {
    Some(match slot {
        Slot::Loading(j) => priors.loading(j),
        Slot::Intercept(_) => priors.intercept,
        Slot::NoiseVar(_) => priors.noise_var,
        Slot::Beta0 => priors.beta0,
        Slot::BetaZ => priors.beta_z,
        Slot::SharedMuR | Slot::MuR(_) => priors.mu_r,
        Slot::SharedSigmaR | Slot::SigmaR(_) => priors.sigma_r,
        Slot::MuZ0(_) => priors.mu_z0,
        Slot::SigmaZ0(_) => priors.sigma_z0,
        Slot::BetaA(_) => priors.beta_a,
        Slot::Z0(_) | Slot::R(_) => return None,
    })
}

/// Log posterior over the unconstrained space of a [`Layout`].
#[derive(Clone, Debug)]
pub struct Posterior {
    layout: Layout,
    data: PreparedData,
    priors: PriorSpec,
    slot_priors: Vec<Prior>,
}

impl Posterior {
    pub fn new(structure: &ModelStructure, data: &Dataset, priors: &PriorSpec) -> Result<Self> {
        if structure.d != data.d || structure.n_groups != data.n_groups {
            return Err(Error::Config(format!(
                "model expects d={} and {} groups, data has d={} and {} groups",
                structure.d, structure.n_groups, data.d, data.n_groups
            )));
        }
        let prepared = PreparedData::new(data)?;
        let ids = data.patients.iter().map(|p| p.patient_id.clone()).collect();
        let groups = data.patients.iter().map(|p| p.group.index).collect();
        let layout = Layout::new(structure, priors, ids, groups)?;
        let slot_priors = layout.slots()[..layout.n_global()]
            .iter()
            .map(|&s| slot_prior(priors, s).expect("global slot"))
            .collect();
        Ok(Posterior {
            layout,
            data: prepared,
            priors: priors.clone(),
            slot_priors,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn delta(&self) -> f64 {
        self.data.delta
    }

    /// Log posterior at `theta`; `-inf` where the visit rate overflows or a
    /// value leaves a prior's support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.evaluate(theta, None).total()
    }

    /// Log posterior and its gradient, written into `grad`.
    pub fn log_density_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.evaluate(theta, Some(grad)).total()
    }

    pub fn components(&self, theta: &[f64]) -> DensityComponents {
        self.evaluate(theta, None)
    }

    fn evaluate(&self, theta: &[f64], grad: Option<&mut [f64]>) -> DensityComponents {
        let layout = &self.layout;
        let s = layout.structure();
        assert_eq!(theta.len(), layout.dim(), "parameter vector has wrong length");
        let (params, log_jacobian) = layout.constrain_with_jacobian(theta);
        let mut g = Grad::zeros(s.d, s.n_groups);
        let n_global = layout.n_global();
        let mut glat = vec![0.0; 2 * layout.n_patients()];

        let mut out = DensityComponents {
            log_jacobian,
            ..Default::default()
        };
        let ok = self.likelihood(&params, &mut out, &mut g, &mut glat);
        if !ok {
            if let Some(grad) = grad {
                grad.fill(0.0);
            }
            out.visits = f64::NEG_INFINITY;
            return out;
        }

        // Priors on global slots.
        for k in 0..n_global {
            let x = read_slot(&params, layout.slots()[k]);
            let prior = self.slot_priors[k];
            out.prior += prior.ln_pdf(x);
            add_slot_grad(&mut g, layout.slots()[k], prior.d_ln_pdf(x));
        }
        // Latent priors.
        for (i, lat) in params.latents.iter().enumerate() {
            let gi = layout.patient_groups()[i];
            let gp = &params.groups[gi];
            out.prior += normal_ln_pdf(lat.z0, gp.mu_z0, gp.sigma_z0)
                + normal_ln_pdf(lat.r, gp.mu_r, gp.sigma_r);
            let ez = (lat.z0 - gp.mu_z0) / gp.sigma_z0;
            let er = (lat.r - gp.mu_r) / gp.sigma_r;
            glat[2 * i] -= ez / gp.sigma_z0;
            glat[2 * i + 1] -= er / gp.sigma_r;
            let gg = &mut g.groups[gi];
            gg[0] += ez / gp.sigma_z0;
            gg[1] += (ez * ez - 1.0) / gp.sigma_z0;
            gg[2] += er / gp.sigma_r;
            gg[3] += (er * er - 1.0) / gp.sigma_r;
        }

        let Some(grad) = grad else {
            return out;
        };
        assert_eq!(grad.len(), layout.dim(), "gradient buffer has wrong length");

        // Latent coordinates, and the non-centered chain rule into group slots.
        let (nc_z, nc_r) = (s.parameterization.z0_non_centered(), s.parameterization.r_non_centered());
        for i in 0..layout.n_patients() {
            let (gz, gr) = (glat[2 * i], glat[2 * i + 1]);
            let k = layout.latent_offset(i);
            let gi = layout.patient_groups()[i];
            let gp = &params.groups[gi];
            let gg = &mut g.groups[gi];
            grad[k] = gz;
            grad[k + 1] = gr;
            if nc_z {
                grad[k] = gz * gp.sigma_z0;
                gg[0] += gz;
                gg[1] += gz * theta[k] + 1.0 / gp.sigma_z0;
            }
            if nc_r {
                grad[k + 1] = gr * gp.sigma_r;
                gg[2] += gr;
                gg[3] += gr * theta[k + 1] + 1.0 / gp.sigma_r;
            }
        }
        // Global coordinates through their transforms.
        for k in 0..n_global {
            let slot = layout.slots()[k];
            let gx = match slot {
                Slot::SharedMuR => g.groups.iter().map(|gg| gg[2]).sum(),
                Slot::SharedSigmaR => g.groups.iter().map(|gg| gg[3]).sum(),
                _ => read_grad(&g, slot),
            };
            grad[k] = match layout.transforms()[k] {
                Transform::Identity => gx,
                Transform::LowerBound(l) => gx * (read_slot(&params, slot) - l) + 1.0,
            };
        }
        out
    }

    /// Emission and visit terms; `false` on visit-rate overflow.
    fn likelihood(
        &self,
        params: &ParameterVector,
        out: &mut DensityComponents,
        g: &mut Grad,
        glat: &mut [f64],
    ) -> bool {
        let sh = &params.shared;
        let delta = self.data.delta;
        let ln_psi: Vec<f64> = sh.noise_var.iter().map(|p| p.ln()).collect();
        for (i, p) in self.data.patients.iter().enumerate() {
            let lat = params.latents[i];
            let gp = &params.groups[p.group];
            // Emission.
            for &(j, st) in &p.cells {
                let (f, psi) = (sh.loadings[j], sh.noise_var[j]);
                let c = f * lat.z0 + sh.intercepts[j];
                let fr = f * lat.r;
                let sres = st.x0 - st.n * c - fr * st.s1;
                let sres_t = st.x1 - c * st.s1 - fr * st.s2;
                let ssr = st.xx - 2.0 * c * st.x0 - 2.0 * fr * st.x1
                    + st.n * c * c
                    + 2.0 * c * fr * st.s1
                    + fr * fr * st.s2;
                out.emission += -0.5 * st.n * (LN_2PI + ln_psi[j]) - 0.5 * ssr / psi;
                let (u0, u1) = (sres / psi, sres_t / psi);
                glat[2 * i] += f * u0;
                glat[2 * i + 1] += f * u1;
                g.loadings[j] += lat.z0 * u0 + lat.r * u1;
                g.intercepts[j] += u0;
                g.noise_var[j] += -0.5 * st.n / psi + 0.5 * ssr / (psi * psi);
            }
            // Visits.
            let a = sh.beta0 + sh.beta_z * lat.z0 + gp.beta_a;
            let b = sh.beta_z * lat.r * delta;
            let Some((ll, da, db)) = patient_visits(p, a, b, delta) else {
                return false;
            };
            out.visits += ll;
            g.beta0 += da;
            g.groups[p.group][4] += da;
            g.beta_z += da * lat.z0 + db * lat.r * delta;
            glat[2 * i] += da * sh.beta_z;
            glat[2 * i + 1] += db * sh.beta_z * delta;
        }
        true
    }

    /// Draws an unconstrained point from the priors: globals from their
    /// priors, latents from the drawn group distributions.
    pub fn prior_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let layout = &self.layout;
        let n_global = layout.n_global();
        let mut theta = vec![0.0; layout.dim()];
        for k in 0..n_global {
            let t = layout.transforms()[k];
            let x = loop {
                let x = self.slot_priors[k].sample(rng);
                if t.unconstrain(x).is_some_and(f64::is_finite) {
                    break x;
                }
            };
            theta[k] = t.unconstrain(x).expect("checked above");
        }
        let (params, _) = layout.constrain_with_jacobian(&theta);
        let par = layout.structure().parameterization;
        for i in 0..layout.n_patients() {
            let gp = &params.groups[layout.patient_groups()[i]];
            let ez: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let er: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let k = layout.latent_offset(i);
            theta[k] = if par.z0_non_centered() { ez } else { gp.mu_z0 + gp.sigma_z0 * ez };
            theta[k + 1] = if par.r_non_centered() { er } else { gp.mu_r + gp.sigma_r * er };
        }
        theta
    }
}

fn read_slot(p: &ParameterVector, slot: Slot) -> f64 {
    match slot {
        Slot::Loading(j) => p.shared.loadings[j],
        Slot::Intercept(j) => p.shared.intercepts[j],
        Slot::NoiseVar(j) => p.shared.noise_var[j],
        Slot::Beta0 => p.shared.beta0,
        Slot::BetaZ => p.shared.beta_z,
        Slot::SharedMuR => p.groups[0].mu_r,
        Slot::SharedSigmaR => p.groups[0].sigma_r,
        Slot::MuZ0(g) => p.groups[g].mu_z0,
        Slot::SigmaZ0(g) => p.groups[g].sigma_z0,
        Slot::MuR(g) => p.groups[g].mu_r,
        Slot::SigmaR(g) => p.groups[g].sigma_r,
        Slot::BetaA(g) => p.groups[g].beta_a,
        Slot::Z0(i) => p.latents[i].z0,
        Slot::R(i) => p.latents[i].r,
    }
}

fn read_grad(g: &Grad, slot: Slot) -> f64 {
    match slot {
        Slot::Loading(j) => g.loadings[j],
        Slot::Intercept(j) => g.intercepts[j],
        Slot::NoiseVar(j) => g.noise_var[j],
        Slot::Beta0 => g.beta0,
        Slot::BetaZ => g.beta_z,
        Slot::MuZ0(k) => g.groups[k][0],
        Slot::SigmaZ0(k) => g.groups[k][1],
        Slot::MuR(k) => g.groups[k][2],
        Slot::SigmaR(k) => g.groups[k][3],
        Slot::BetaA(k) => g.groups[k][4],
        Slot::SharedMuR | Slot::SharedSigmaR | Slot::Z0(_) | Slot::R(_) => {
            unreachable!("handled by the caller")
        }
    }
}

/// Adds a prior gradient; shared rate slots are spread onto group 0, which
/// the caller sums over all groups.
fn add_slot_grad(g: &mut Grad, slot: Slot, v: f64) {
    match slot {
        Slot::Loading(j) => g.loadings[j] += v,
        Slot::Intercept(j) => g.intercepts[j] += v,
        Slot::NoiseVar(j) => g.noise_var[j] += v,
        Slot::Beta0 => g.beta0 += v,
        Slot::BetaZ => g.beta_z += v,
        Slot::SharedMuR => g.groups[0][2] += v,
        Slot::SharedSigmaR => g.groups[0][3] += v,
        Slot::MuZ0(k) => g.groups[k][0] += v,
        Slot::SigmaZ0(k) => g.groups[k][1] += v,
        Slot::MuR(k) => g.groups[k][2] += v,
        Slot::SigmaR(k) => g.groups[k][3] += v,
        Slot::BetaA(k) => g.groups[k][4] += v,
        Slot::Z0(_) | Slot::R(_) => unreachable!("latents have no slot prior"),
    }
}

fn check_noise(shared: &SharedParams) -> Result<()> {
    if let Some(j) = shared.noise_var.iter().position(|&p| !(p > 0.0)) {
        return Err(Error::invalid(format!("psi[{j}]"), "must be > 0"));
    }
    Ok(())
}

/// Emission log-likelihood: Gaussian log-density of every observed cell.
pub fn log_lik_emission(shared: &SharedParams, latents: &[PatientLatents], data: &Dataset) -> Result<f64> {
    check_noise(shared)?;
    check_sizes(shared, latents, data)?;
    let mut total = 0.0;
    for (p, lat) in data.patients.iter().zip(latents) {
        for (t, row) in p.features.iter().enumerate() {
            let z = lat.severity(t as f64 * data.delta);
            for (j, x) in row.iter().enumerate() {
                if let Some(x) = *x {
                    let mean = shared.loadings[j] * z + shared.intercepts[j];
                    total += normal_ln_pdf(x, mean, shared.noise_var[j].sqrt());
                }
            }
        }
    }
    Ok(total)
}

/// Visit log-likelihood over bins `1..T` of every patient; `-inf` when the
/// log-rate exceeds [`MAX_LOG_RATE`].
pub fn log_lik_visits(
    shared: &SharedParams,
    groups: &[GroupParams],
    latents: &[PatientLatents],
    data: &Dataset,
) -> Result<f64> {
    check_sizes(shared, latents, data)?;
    if groups.len() != data.n_groups {
        return Err(Error::invalid("groups", "wrong number of groups"));
    }
    let prepared = PreparedData::new(data)?;
    let mut total = 0.0;
    for (p, lat) in prepared.patients.iter().zip(latents) {
        let a = shared.beta0 + shared.beta_z * lat.z0 + groups[p.group].beta_a;
        let b = shared.beta_z * lat.r * data.delta;
        match patient_visits(p, a, b, data.delta) {
            Some((ll, _, _)) => total += ll,
            None => return Ok(f64::NEG_INFINITY),
        }
    }
    Ok(total)
}

fn check_sizes(shared: &SharedParams, latents: &[PatientLatents], data: &Dataset) -> Result<()> {
    if shared.d() != data.d {
        return Err(Error::invalid("shared", format!("expected {} features", data.d)));
    }
    if latents.len() != data.patients.len() {
        return Err(Error::invalid("latents", "one entry per patient required"));
    }
    Ok(())
}

/// Sum of prior log-densities of every free parameter of `layout` plus the
/// latent densities under each patient's group.
pub fn log_prior(layout: &Layout, params: &ParameterVector, priors: &PriorSpec) -> Result<f64> {
    priors.validate(layout.structure().d)?;
    let mut total = 0.0;
    for &slot in &layout.slots()[..layout.n_global()] {
        let prior = slot_prior(priors, slot).expect("global slot");
        total += prior.ln_pdf(read_slot(params, slot));
    }
    for (lat, &gi) in params.latents.iter().zip(layout.patient_groups()) {
        let gp = &params.groups[gi];
        total += normal_ln_pdf(lat.z0, gp.mu_z0, gp.sigma_z0) + normal_ln_pdf(lat.r, gp.mu_r, gp.sigma_r);
    }
    Ok(total)
}

/// Log posterior at an unconstrained point.
pub fn log_posterior(
    structure: &ModelStructure,
    theta: &[f64],
    data: &Dataset,
    priors: &PriorSpec,
) -> Result<f64> {
    check_theta(theta)?;
    Ok(Posterior::new(structure, data, priors)?.log_density(theta))
}

/// Gradient of [`log_posterior`] with respect to every unconstrained coordinate.
pub fn grad_log_posterior(
    structure: &ModelStructure,
    theta: &[f64],
    data: &Dataset,
    priors: &PriorSpec,
) -> Result<Vec<f64>> {
    check_theta(theta)?;
    let post = Posterior::new(structure, data, priors)?;
    let mut g = vec![0.0; post.dim()];
    post.log_density_grad(theta, &mut g);
    Ok(g)
}

fn check_theta(theta: &[f64]) -> Result<()> {
    if let Some(k) = theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("theta[{k}]"), "non-finite value"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_sums_match_loop() {
        for &(a, b, n) in &[(0.3, 0.2, 49), (-1.0, -0.05, 30), (2.0, 1e-5, 10), (0.0, 0.7, 1), (-3.0, -2.0, 40)] {
            let (g, h) = geometric_sums(a, b, n);
            let mut gl = 0.0;
            let mut hl = 0.0;
            for t in 1..=n {
                let e = f64::exp(a + b * t as f64);
                gl += e;
                hl += t as f64 * e;
            }
            assert!((g - gl).abs() <= 1e-12 * gl, "G {a} {b} {n}: {g} vs {gl}");
            assert!((h - hl).abs() <= 1e-11 * hl, "H {a} {b} {n}: {h} vs {hl}");
        }
    }
}
