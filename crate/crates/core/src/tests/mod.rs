//! Cross-module and property tests.

mod gradient;
mod model;
mod simulate;
mod biaslab;
