use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the reference group whose initial-severity distribution and
/// visit offset are pinned.
pub const REFERENCE_GROUP: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupId {
    pub index: usize,
    pub is_pinned: bool,
}

impl GroupId {
    pub fn new(index: usize) -> Self {
        GroupId {
            index,
            is_pinned: index == REFERENCE_GROUP,
        }
    }
}

/// Population-level parameters shared by every group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedParams {
    /// Severity-to-feature loadings `F`.
    pub loadings: Vec<f64>,
    /// Feature intercepts `b`.
    pub intercepts: Vec<f64>,
    /// Diagonal of the feature noise covariance `Ψ`.
    pub noise_var: Vec<f64>,
    /// Visit-rate log-intercept.
    pub beta0: f64,
    /// Visit-rate severity coefficient.
    pub beta_z: f64,
}

impl SharedParams {
    pub fn d(&self) -> usize {
        self.loadings.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.loadings.len();
        if self.intercepts.len() != d || self.noise_var.len() != d {
            return Err(Error::invalid("shared", "F, b and psi lengths differ"));
        }
        let all = self
            .loadings
            .iter()
            .chain(&self.intercepts)
            .chain(&self.noise_var)
            .chain([&self.beta0, &self.beta_z]);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("shared", "non-finite value"));
        }
        if let Some(j) = self.noise_var.iter().position(|&p| p <= 0.0) {
            return Err(Error::invalid(format!("psi[{j}]"), "must be > 0"));
        }
        Ok(())
    }
}

/// Group-specific parameters. For the reference group `mu_z0 = 0`,
/// `sigma_z0 = 1` and `beta_a = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupParams {
    pub mu_z0: f64,
    pub sigma_z0: f64,
    pub mu_r: f64,
    pub sigma_r: f64,
    pub beta_a: f64,
}

impl GroupParams {
    /// The reference group with the given progression-rate distribution.
    pub fn reference(mu_r: f64, sigma_r: f64) -> Self {
        GroupParams {
            mu_z0: 0.0,
            sigma_z0: 1.0,
            mu_r,
            sigma_r,
            beta_a: 0.0,
        }
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        let vals = [self.mu_z0, self.sigma_z0, self.mu_r, self.sigma_r, self.beta_a];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("group[{index}]"), "non-finite value"));
        }
        if self.sigma_z0 <= 0.0 || self.sigma_r <= 0.0 {
            return Err(Error::invalid(
                format!("group[{index}]"),
                "sigmaZ0 and sigmaR must be > 0",
            ));
        }
        if index == REFERENCE_GROUP
            && (self.mu_z0 != 0.0 || self.sigma_z0 != 1.0 || self.beta_a != 0.0)
        {
            return Err(Error::invalid(
                format!("group[{index}]"),
                "reference group must have muZ0 = 0, sigmaZ0 = 1, betaA = 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientLatents {
    pub z0: f64,
    pub r: f64,
}

impl PatientLatents {
    /// Severity at normalized time `tau`.
    #[inline]
    pub fn severity(&self, tau: f64) -> f64 {
        self.z0 + self.r * tau
    }
}

/// One patient's observations on the discrete time grid. Bin 0 is the first
/// visit; `features[t][j]` is `None` when unobserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub group: GroupId,
    pub visits: Vec<bool>,
    pub features: Vec<Vec<Option<f64>>>,
}

impl PatientRecord {
    /// Number of bins `T` on record.
    pub fn horizon(&self) -> usize {
        self.visits.len()
    }

    pub fn visit_bins(&self) -> impl Iterator<Item = usize> + '_ {
        self.visits
            .iter()
            .enumerate()
            .filter_map(|(t, &v)| v.then_some(t))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let id = &self.patient_id;
        let t_len = self.visits.len();
        if t_len == 0 {
            return Err(Error::Data(format!("patient {id}: empty record")));
        }
        if !self.visits[0] {
            return Err(Error::Data(format!("patient {id}: D[0] must be 1")));
        }
        if self.features.len() != t_len {
            return Err(Error::Data(format!(
                "patient {id}: {} feature rows for {t_len} bins",
                self.features.len()
            )));
        }
        for (t, row) in self.features.iter().enumerate() {
            if row.len() != d {
                return Err(Error::Data(format!(
                    "patient {id}, bin {t}: expected {d} features, found {}",
                    row.len()
                )));
            }
            let n_obs = row.iter().filter(|c| c.is_some()).count();
            if !self.visits[t] && n_obs > 0 {
                return Err(Error::Data(format!(
                    "patient {id}, bin {t}: features observed without a visit"
                )));
            }
            if self.visits[t] && n_obs == 0 {
                return Err(Error::Data(format!(
                    "patient {id}, bin {t}: visit without any observed feature"
                )));
            }
            if row.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("patient {id}, bin {t}: non-finite feature")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub patients: Vec<PatientRecord>,
    pub n_groups: usize,
    pub d: usize,
    /// Bin width in normalized time units.
    pub delta: f64,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(Error::Data(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.d == 0 || self.n_groups == 0 {
            return Err(Error::Data("d and n_groups must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for p in &self.patients {
            if !seen.insert(p.patient_id.as_str()) {
                return Err(Error::Data(format!("duplicate patient id {}", p.patient_id)));
            }
            if p.group.index >= self.n_groups {
                return Err(Error::Data(format!(
                    "patient {}: group {} outside 0..{}",
                    p.patient_id, p.group.index, self.n_groups
                )));
            }
            p.validate(self.d)?;
        }
        Ok(())
    }

    pub fn patient_index(&self, id: &str) -> Option<usize> {
        self.patients.iter().position(|p| p.patient_id == id)
    }

    pub fn max_horizon(&self) -> usize {
        self.patients.iter().map(|p| p.horizon()).max().unwrap_or(0)
    }

    pub fn n_visits(&self) -> usize {
        self.patients.iter().map(|p| p.visit_bins().count()).sum()
    }

    /// Dataset restricted to the first `bins` bins of every patient.
    pub fn truncated(&self, bins: usize) -> Dataset {
        let patients = self
            .patients
            .iter()
            .map(|p| {
                let keep = bins.min(p.horizon()).max(1);
                PatientRecord {
                    patient_id: p.patient_id.clone(),
                    group: p.group,
                    visits: p.visits[..keep].to_vec(),
                    features: p.features[..keep].to_vec(),
                }
            })
            .collect();
        Dataset {
            patients,
            n_groups: self.n_groups,
            d: self.d,
            delta: self.delta,
        }
    }
}

/// Constrained-space values of every model quantity. `groups` always holds
/// one fully resolved entry per group, pinned values included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub shared: SharedParams,
    pub groups: Vec<GroupParams>,
    pub latents: Vec<PatientLatents>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(visits: Vec<bool>, features: Vec<Vec<Option<f64>>>) -> PatientRecord {
        PatientRecord {
            patient_id: "p".into(),
            group: GroupId::new(0),
            visits,
            features,
        }
    }

    #[test]
    fn record_invariants() {
        assert!(record(vec![true, false], vec![vec![Some(1.0)], vec![None]])
            .validate(1)
            .is_ok());
        // first bin must be a visit
        assert!(record(vec![false], vec![vec![None]]).validate(1).is_err());
        // features without a visit
        assert!(record(vec![true, false], vec![vec![Some(1.0)], vec![Some(2.0)]])
            .validate(1)
            .is_err());
        // a visit with nothing observed
        assert!(record(vec![true, true], vec![vec![Some(1.0)], vec![None]])
            .validate(1)
            .is_err());
    }

    #[test]
    fn reference_group_is_pinned() {
        assert!(GroupId::new(0).is_pinned);
        assert!(!GroupId::new(1).is_pinned);
        assert!(GroupParams::reference(1.0, 0.5).validate(0).is_ok());
        let mut g = GroupParams::reference(1.0, 0.5);
        g.mu_z0 = 0.3;
        assert!(g.validate(0).is_err());
        assert!(g.validate(1).is_ok());
    }
}
