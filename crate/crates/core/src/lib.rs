//! Conditional survival estimation with time-varying covariates.

pub mod coxtv;
pub mod deeponet;
pub mod error;
pub mod evalmetrics;
pub mod methods;
pub mod seeds;
pub mod simgen;
pub mod survloss;

pub use error::{Result, SurvError};
