//! Disparity-aware Bayesian disease-progression modelling: the generative
//! model and its density, a NUTS sampler, a cohort simulator, posterior
//! summaries, ablation-bias experiments and baseline methods.

pub mod baselines;
pub mod biaslab;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod quadrature;
pub mod sampler;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};

#[cfg(test)]
mod tests;
