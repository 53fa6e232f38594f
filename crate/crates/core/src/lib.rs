//! Nonstationary spatial Gaussian processes through learned warpings of the
//! spatial domain.
//!
//! A triangular neural autoregressive flow T maps locations into a space where
//! the process is modeled as stationary and isotropic with a Matérn kernel.
//! Flow, covariance and noise parameters are fitted jointly by maximum
//! likelihood, and predictions are simple-kriging means with intervals.

pub mod bessel;
pub mod conditioner;
pub mod covariance;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod fit;
pub mod flow;
pub mod likelihood;
pub mod linalg;
pub mod params;
pub mod predict;
pub mod simulate;
pub mod types;

pub use error::{Error, Result};
