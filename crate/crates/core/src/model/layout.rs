//! Canonical parameter ordering and the constraining transforms.
//!
//! The unconstrained vector is laid out as: the shared block (`F`, `b`,
//! `psi`, `beta0`, `betaZ`, then `muR`/`sigmaR` when progression rates are
//! shared), the free parameters of each group in index order (`muZ0`,
//! `sigmaZ0`, `muR`, `sigmaR`, `betaA`, whichever are free), and finally
//! `z0`, `r` for every patient in dataset order.

use serde::{Deserialize, Serialize};

use super::prior::{Prior, PriorSpec};
use super::types::{GroupParams, ParameterVector, PatientLatents, SharedParams, REFERENCE_GROUP};
use crate::error::{Error, Result};

/// How patient latents appear in the unconstrained vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentParameterization {
    /// `z0` and `r` directly.
    Centered,
    /// Standardized innovations: `z0 = muZ0 + sigmaZ0 * e`, `r = muR + sigmaR * u`.
    NonCentered,
    /// `z0` directly and `r` through its innovation.
    #[default]
    CenteredInitial,
}

impl LatentParameterization {
    pub fn z0_non_centered(self) -> bool {
        self == LatentParameterization::NonCentered
    }

    pub fn r_non_centered(self) -> bool {
        self != LatentParameterization::Centered
    }
}

/// Which group-specific parameter blocks are free.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub n_groups: usize,
    pub d: usize,
    /// Non-reference groups learn `muZ0`, `sigmaZ0`; otherwise every group uses N(0, 1).
    pub initial_disparity: bool,
    /// Every group learns its own `muR`, `sigmaR`; otherwise one pair is shared.
    pub rate_disparity: bool,
    /// Non-reference groups learn `betaA`; otherwise it is absent.
    pub visit_disparity: bool,
    /// Structural lower bound on `F[0]`.
    pub f0_lower: f64,
    pub parameterization: LatentParameterization,
}

impl ModelStructure {
    pub fn full(n_groups: usize, d: usize) -> Self {
        ModelStructure {
            n_groups,
            d,
            initial_disparity: true,
            rate_disparity: true,
            visit_disparity: true,
            f0_lower: 0.0,
            parameterization: LatentParameterization::default(),
        }
    }

    pub fn with_parameterization(mut self, p: LatentParameterization) -> Self {
        self.parameterization = p;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    /// `x = lower + exp(u)`.
    LowerBound(f64),
}

impl Transform {
    #[inline]
    pub fn constrain(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::LowerBound(l) => l + u.exp(),
        }
    }

    pub fn unconstrain(self, x: f64) -> Option<f64> {
        match self {
            Transform::Identity => Some(x),
            Transform::LowerBound(l) => (x > l).then(|| (x - l).ln()),
        }
    }

    /// `ln |dx/du|` at `u`.
    #[inline]
    pub fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::LowerBound(_) => u,
        }
    }
}

/// What a coordinate of the parameter vector refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Loading(usize),
    Intercept(usize),
    NoiseVar(usize),
    Beta0,
    BetaZ,
    SharedMuR,
    SharedSigmaR,
    MuZ0(usize),
    SigmaZ0(usize),
    MuR(usize),
    SigmaR(usize),
    BetaA(usize),
    Z0(usize),
    R(usize),
}

impl Slot {
    pub fn is_latent(self) -> bool {
        matches!(self, Slot::Z0(_) | Slot::R(_))
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    structure: ModelStructure,
    slots: Vec<Slot>,
    transforms: Vec<Transform>,
    names: Vec<String>,
    patient_ids: Vec<String>,
    patient_groups: Vec<usize>,
    n_global: usize,
}

fn lower_of(structural: Option<f64>, prior: Prior) -> Transform {
    match (structural, prior.lower()) {
        (None, None) => Transform::Identity,
        (Some(a), None) | (None, Some(a)) => Transform::LowerBound(a),
        (Some(a), Some(b)) => Transform::LowerBound(a.max(b)),
    }
}

impl Layout {
    /// Builds the layout. Parameters with a truncated prior are bounded below
    /// by the larger of the truncation point and any structural bound.
    pub fn new(
        structure: &ModelStructure,
        priors: &PriorSpec,
        patient_ids: Vec<String>,
        patient_groups: Vec<usize>,
    ) -> Result<Self> {
        if structure.n_groups == 0 || structure.d == 0 {
            return Err(Error::Config("model needs at least one group and one feature".into()));
        }
        if patient_ids.len() != patient_groups.len() {
            return Err(Error::Config("patient ids and groups differ in length".into()));
        }
        if let Some(&g) = patient_groups.iter().find(|&&g| g >= structure.n_groups) {
            return Err(Error::Config(format!("group {g} outside the model's groups")));
        }
        priors.validate(structure.d)?;
        let d = structure.d;
        let mut slots = Vec::new();
        let mut transforms = Vec::new();
        let mut names = Vec::new();
        macro_rules! push {
            ($slot:expr, $t:expr, $name:expr) => {{
                slots.push($slot);
                transforms.push($t);
                names.push($name);
            }};
        }

        for j in 0..d {
            let structural = (j == 0).then_some(structure.f0_lower);
            push!(Slot::Loading(j), lower_of(structural, priors.loading(j)), format!("F[{j}]"));
        }
        for j in 0..d {
            push!(Slot::Intercept(j), lower_of(None, priors.intercept), format!("b[{j}]"));
        }
        for j in 0..d {
            push!(Slot::NoiseVar(j), lower_of(Some(0.0), priors.noise_var), format!("psi[{j}]"));
        }
        push!(Slot::Beta0, lower_of(None, priors.beta0), "beta0".into());
        push!(Slot::BetaZ, lower_of(None, priors.beta_z), "betaZ".into());
        if !structure.rate_disparity {
            push!(Slot::SharedMuR, lower_of(None, priors.mu_r), "muR".into());
            push!(Slot::SharedSigmaR, lower_of(Some(0.0), priors.sigma_r), "sigmaR".into());
        }
        for g in 0..structure.n_groups {
            let free_initial = structure.initial_disparity && g != REFERENCE_GROUP;
            if free_initial {
                push!(Slot::MuZ0(g), lower_of(None, priors.mu_z0), format!("muZ0[{g}]"));
                push!(Slot::SigmaZ0(g), lower_of(Some(0.0), priors.sigma_z0), format!("sigmaZ0[{g}]"));
            }
            if structure.rate_disparity {
                push!(Slot::MuR(g), lower_of(None, priors.mu_r), format!("muR[{g}]"));
                push!(Slot::SigmaR(g), lower_of(Some(0.0), priors.sigma_r), format!("sigmaR[{g}]"));
            }
            if structure.visit_disparity && g != REFERENCE_GROUP {
                push!(Slot::BetaA(g), lower_of(None, priors.beta_a), format!("betaA[{g}]"));
            }
        }
        let n_global = names.len();
        for (i, id) in patient_ids.iter().enumerate() {
            push!(Slot::Z0(i), Transform::Identity, format!("z0[{id}]"));
            push!(Slot::R(i), Transform::Identity, format!("r[{id}]"));
        }
        Ok(Layout {
            structure: structure.clone(),
            slots,
            transforms,
            names,
            patient_ids,
            patient_groups,
            n_global,
        })
    }

    pub fn structure(&self) -> &ModelStructure {
        &self.structure
    }

    pub fn dim(&self) -> usize {
        self.slots.len()
    }

    /// Number of non-latent coordinates (they come first).
    pub fn n_global(&self) -> usize {
        self.n_global
    }

    pub fn n_patients(&self) -> usize {
        self.patient_ids.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    pub fn patient_groups(&self) -> &[usize] {
        &self.patient_groups
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Index of `z0` for patient `i`; `r` follows it.
    pub fn latent_offset(&self, i: usize) -> usize {
        self.n_global + 2 * i
    }

    /// Constrained value of every coordinate, in canonical order.
    pub fn flatten(&self, params: &ParameterVector) -> Vec<f64> {
        self.slots.iter().map(|&s| self.read(params, s)).collect()
    }

    fn read(&self, p: &ParameterVector, slot: Slot) -> f64 {
        match slot {
            Slot::Loading(j) => p.shared.loadings[j],
            Slot::Intercept(j) => p.shared.intercepts[j],
            Slot::NoiseVar(j) => p.shared.noise_var[j],
            Slot::Beta0 => p.shared.beta0,
            Slot::BetaZ => p.shared.beta_z,
            Slot::SharedMuR => p.groups[REFERENCE_GROUP].mu_r,
            Slot::SharedSigmaR => p.groups[REFERENCE_GROUP].sigma_r,
            Slot::MuZ0(g) => p.groups[g].mu_z0,
            Slot::SigmaZ0(g) => p.groups[g].sigma_z0,
            Slot::MuR(g) => p.groups[g].mu_r,
            Slot::SigmaR(g) => p.groups[g].sigma_r,
            Slot::BetaA(g) => p.groups[g].beta_a,
            Slot::Z0(i) => p.latents[i].z0,
            Slot::R(i) => p.latents[i].r,
        }
    }

    fn write(&self, p: &mut ParameterVector, slot: Slot, x: f64) {
        match slot {
            Slot::Loading(j) => p.shared.loadings[j] = x,
            Slot::Intercept(j) => p.shared.intercepts[j] = x,
            Slot::NoiseVar(j) => p.shared.noise_var[j] = x,
            Slot::Beta0 => p.shared.beta0 = x,
            Slot::BetaZ => p.shared.beta_z = x,
            Slot::SharedMuR => p.groups.iter_mut().for_each(|g| g.mu_r = x),
            Slot::SharedSigmaR => p.groups.iter_mut().for_each(|g| g.sigma_r = x),
            Slot::MuZ0(g) => p.groups[g].mu_z0 = x,
            Slot::SigmaZ0(g) => p.groups[g].sigma_z0 = x,
            Slot::MuR(g) => p.groups[g].mu_r = x,
            Slot::SigmaR(g) => p.groups[g].sigma_r = x,
            Slot::BetaA(g) => p.groups[g].beta_a = x,
            Slot::Z0(i) => p.latents[i].z0 = x,
            Slot::R(i) => p.latents[i].r = x,
        }
    }

    /// Moves every bounded global parameter at least `margin` above its
    /// lower bound.
    pub fn clamp_to_support(&self, params: &mut ParameterVector, margin: f64) {
        for k in 0..self.n_global {
            if let Transform::LowerBound(l) = self.transforms[k] {
                let x = self.read(params, self.slots[k]);
                if !(x >= l + margin) {
                    self.write(params, self.slots[k], l + margin);
                }
            }
        }
    }

    /// Maps constrained parameters to the unconstrained space.
    pub fn unconstrain(&self, params: &ParameterVector) -> Result<Vec<f64>> {
        self.check_shape(params)?;
        let mut out = Vec::with_capacity(self.dim());
        for (k, (&slot, &t)) in self.slots.iter().zip(&self.transforms).enumerate() {
            let x = self.read(params, slot);
            if !x.is_finite() {
                return Err(Error::invalid(&self.names[k], "non-finite value"));
            }
            let u = match slot {
                Slot::Z0(i) if self.structure.parameterization.z0_non_centered() => {
                    let g = &params.groups[self.patient_groups[i]];
                    (x - g.mu_z0) / g.sigma_z0
                }
                Slot::R(i) if self.structure.parameterization.r_non_centered() => {
                    let g = &params.groups[self.patient_groups[i]];
                    (x - g.mu_r) / g.sigma_r
                }
                _ => t.unconstrain(x).ok_or_else(|| {
                    Error::invalid(&self.names[k], format!("value {x} violates its lower bound"))
                })?,
            };
            out.push(u);
        }
        Ok(out)
    }

    fn check_shape(&self, p: &ParameterVector) -> Result<()> {
        let d = self.structure.d;
        if p.shared.loadings.len() != d || p.shared.intercepts.len() != d || p.shared.noise_var.len() != d {
            return Err(Error::invalid("shared", format!("expected {d} features")));
        }
        if p.groups.len() != self.structure.n_groups {
            return Err(Error::invalid("groups", "wrong number of groups"));
        }
        if p.latents.len() != self.n_patients() {
            return Err(Error::invalid("latents", "wrong number of patients"));
        }
        Ok(())
    }

    /// Maps an unconstrained vector back to constrained parameters and
    /// returns the log-Jacobian of that map.
    pub fn constrain_with_jacobian(&self, theta: &[f64]) -> (ParameterVector, f64) {
        assert_eq!(theta.len(), self.dim(), "parameter vector has wrong length");
        let s = &self.structure;
        let mut shared = SharedParams {
            loadings: vec![0.0; s.d],
            intercepts: vec![0.0; s.d],
            noise_var: vec![0.0; s.d],
            beta0: 0.0,
            beta_z: 0.0,
        };
        let mut groups = vec![GroupParams::reference(0.0, 1.0); s.n_groups];
        let mut latents = vec![PatientLatents::default(); self.n_patients()];
        let mut log_jac = 0.0;
        let mut shared_rate = (0.0, 1.0);

        for k in 0..self.n_global {
            let (u, t) = (theta[k], self.transforms[k]);
            let x = t.constrain(u);
            log_jac += t.log_jacobian(u);
            match self.slots[k] {
                Slot::Loading(j) => shared.loadings[j] = x,
                Slot::Intercept(j) => shared.intercepts[j] = x,
                Slot::NoiseVar(j) => shared.noise_var[j] = x,
                Slot::Beta0 => shared.beta0 = x,
                Slot::BetaZ => shared.beta_z = x,
                Slot::SharedMuR => shared_rate.0 = x,
                Slot::SharedSigmaR => shared_rate.1 = x,
                Slot::MuZ0(g) => groups[g].mu_z0 = x,
                Slot::SigmaZ0(g) => groups[g].sigma_z0 = x,
                Slot::MuR(g) => groups[g].mu_r = x,
                Slot::SigmaR(g) => groups[g].sigma_r = x,
                Slot::BetaA(g) => groups[g].beta_a = x,
                Slot::Z0(_) | Slot::R(_) => unreachable!("latents follow the global block"),
            }
        }
        if !s.rate_disparity {
            for g in groups.iter_mut() {
                g.mu_r = shared_rate.0;
                g.sigma_r = shared_rate.1;
            }
        }
        let (nc_z, nc_r) = (s.parameterization.z0_non_centered(), s.parameterization.r_non_centered());
        for (i, lat) in latents.iter_mut().enumerate() {
            let (a, b) = (theta[self.n_global + 2 * i], theta[self.n_global + 2 * i + 1]);
            let g = &groups[self.patient_groups[i]];
            lat.z0 = a;
            lat.r = b;
            if nc_z {
                lat.z0 = g.mu_z0 + g.sigma_z0 * a;
                log_jac += g.sigma_z0.ln();
            }
            if nc_r {
                lat.r = g.mu_r + g.sigma_r * b;
                log_jac += g.sigma_r.ln();
            }
        }
        (
            ParameterVector {
                shared,
                groups,
                latents,
            },
            log_jac,
        )
    }

    pub fn constrain(&self, theta: &[f64]) -> ParameterVector {
        self.constrain_with_jacobian(theta).0
    }

    /// Constrained values in canonical order (the row written to draw files).
    pub fn constrain_flat(&self, theta: &[f64]) -> Vec<f64> {
        self.flatten(&self.constrain(theta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(structure: &ModelStructure, groups: Vec<usize>) -> Layout {
        let ids = (0..groups.len()).map(|i| format!("p{i}")).collect();
        Layout::new(structure, &PriorSpec::synthetic_fit(), ids, groups).unwrap()
    }

    #[test]
    fn transforms_of_simple_values() {
        assert_eq!(Transform::LowerBound(0.0).unconstrain(1.0), Some(0.0));
        let e = std::f64::consts::E;
        assert!((Transform::LowerBound(0.0).unconstrain(e).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(Transform::LowerBound(0.5).unconstrain(0.4), None);
    }

    #[test]
    fn canonical_order_and_names() {
        let l = layout(&ModelStructure::full(2, 2), vec![0, 1]);
        let names: Vec<&str> = l.names().iter().map(String::as_str).collect();
        assert_eq!(
            names,
            [
                "F[0]", "F[1]", "b[0]", "b[1]", "psi[0]", "psi[1]", "beta0", "betaZ", "muR[0]",
                "sigmaR[0]", "muZ0[1]", "sigmaZ0[1]", "muR[1]", "sigmaR[1]", "betaA[1]", "z0[p0]",
                "r[p0]", "z0[p1]", "r[p1]"
            ]
        );
        assert_eq!(l.n_global(), 15);
        // betaZ carries the truncation of its synthetic prior
        assert_eq!(l.transforms()[7], Transform::LowerBound(0.1));
        assert_eq!(l.transforms()[0], Transform::LowerBound(0.0));
    }

    #[test]
    fn ablated_structure_has_no_group_columns() {
        let s = ModelStructure {
            initial_disparity: false,
            rate_disparity: false,
            visit_disparity: false,
            ..ModelStructure::full(2, 3)
        };
        let l = layout(&s, vec![0, 1, 1]);
        assert!(l.names()[..l.n_global()].iter().all(|n| !n.contains('[') || n.starts_with('F')
            || n.starts_with('b') || n.starts_with("psi")));
        assert_eq!(layout(&ModelStructure::full(2, 3), vec![0]).n_global() - l.n_global(), 5);
    }
}
