//! Numerical laboratory for reconstructing the gradient of a log-correlated
//! Gaussian field from its imaginary multiplicative chaos.
//!
//! Pipeline: [`sampler`] draws a regularized field, [`chaos`] exponentiates it,
//! [`estimator`] computes `H_eta` / `A_N`, and [`oracle`] provides exact or
//! quadrature reference values for every moment the estimator relies on.

pub mod chaos;
pub mod covariance;
pub mod error;
pub mod estimator;
pub mod fft;
pub mod grid;
pub mod harness;
pub mod mollifier;
pub mod oracle;
pub mod quad;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
pub use num_complex::Complex64;
