//! Dynamic covariance estimation with honest random forests.
//!
//! The estimator combines two forests: one whose similarity weights α(u)
//! estimate the conditional mean of Y given U = u, and one whose weights β(u)
//! estimate the conditional second moment. Their difference gives a raw
//! covariance estimate at u, which is then thresholded off the diagonal and,
//! if needed, shifted to be positive definite.
//!
//! The crate also ships the benchmark models and metrics used to validate the
//! estimator, static and kernel baselines, and a minimum-variance portfolio
//! backtester.

pub mod covariance;
pub mod dataset;
pub mod error;
pub mod estimator;
pub mod forest;
pub mod linalg;
pub mod portfolio;
pub mod rng;
pub mod simulation;
pub mod thresholding;

pub use error::{Error, Result};
