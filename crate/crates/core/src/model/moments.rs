//! Closed-form marginal moments of features and visit rates given group
//! parameters, with the latents integrated out.

use nalgebra::{DMatrix, DVector};

use super::types::{GroupParams, SharedParams};

/// Mean and covariance of the features of a group member at time `t`.
pub fn marginal_feature_moments(shared: &SharedParams, group: &GroupParams, t: f64) -> (DVector<f64>, DMatrix<f64>) {
    let f = DVector::from_column_slice(&shared.loadings);
    let b = DVector::from_column_slice(&shared.intercepts);
    let mean = &b + &f * (group.mu_r * t + group.mu_z0);
    let var_z = group.sigma_r.powi(2) * t * t + group.sigma_z0.powi(2);
    let cov = &f * f.transpose() * var_z + DMatrix::from_diagonal(&DVector::from_column_slice(&shared.noise_var));
    (mean, cov)
}

/// Log of the expected visit rate at time `t`: a quadratic in `t`.
pub fn log_expected_visit_rate(shared: &SharedParams, group: &GroupParams, t: f64) -> f64 {
    let bz = shared.beta_z;
    let quad = 0.5 * bz * bz * group.sigma_r.powi(2);
    let lin = bz * group.mu_r;
    let constant = shared.beta0 + 0.5 * bz * bz * group.sigma_z0.powi(2) + bz * group.mu_z0 + group.beta_a;
    quad * t * t + lin * t + constant
}

/// `E[λ_t]` for a group member at time `t`.
pub fn expected_visit_rate(shared: &SharedParams, group: &GroupParams, t: f64) -> f64 {
    log_expected_visit_rate(shared, group, t).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shared() -> SharedParams {
        SharedParams {
            loadings: vec![1.0, -0.5],
            intercepts: vec![0.2, 1.0],
            noise_var: vec![0.3, 2.0],
            beta0: 1.5,
            beta_z: 0.4,
        }
    }

    #[test]
    fn reference_group_at_origin() {
        let s = shared();
        let g = GroupParams::reference(1.0, 0.5);
        let (m, c) = marginal_feature_moments(&s, &g, 0.0);
        assert_eq!(m.as_slice(), &[0.2, 1.0]);
        assert!((c[(0, 0)] - 1.3).abs() < 1e-15);
        assert!((c[(0, 1)] + 0.5).abs() < 1e-15);
        assert!((c[(1, 1)] - 2.25).abs() < 1e-15);
        let rate = expected_visit_rate(&s, &g, 0.0);
        assert!((rate - (1.5f64 + 0.08).exp()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_latents_leave_noise() {
        let s = shared();
        let g = GroupParams {
            mu_z0: 0.3,
            sigma_z0: 0.0,
            mu_r: 1.0,
            sigma_r: 0.0,
            beta_a: 0.0,
        };
        let (_, c) = marginal_feature_moments(&s, &g, 0.7);
        assert_eq!(c, DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 2.0])));
    }

    #[test]
    fn severity_free_rate_is_constant() {
        let s = SharedParams { beta_z: 0.0, ..shared() };
        let g = GroupParams {
            beta_a: -0.3,
            ..GroupParams::reference(2.0, 1.0)
        };
        for t in [0.0, 0.5, 1.0] {
            assert!((expected_visit_rate(&s, &g, t) - 1.2f64.exp()).abs() < 1e-12);
        }
    }
}
