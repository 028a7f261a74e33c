//! Domain types, parameter transforms and the joint density.

pub mod density;
pub mod layout;
pub mod moments;
pub mod prior;
pub mod types;

pub use density::{
    grad_log_posterior, log_lik_emission, log_lik_visits, log_posterior, log_prior, DensityComponents,
    Posterior, PreparedData, MAX_LOG_RATE,
};
pub use layout::{LatentParameterization, Layout, ModelStructure, Slot, Transform};
pub use moments::{expected_visit_rate, log_expected_visit_rate, marginal_feature_moments};
pub use prior::{Prior, PriorSpec};
pub use types::{
    Dataset, GroupId, GroupParams, ParameterVector, PatientLatents, PatientRecord, SharedParams, REFERENCE_GROUP,
};
