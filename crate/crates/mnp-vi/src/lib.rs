//! Conditional variational inference for multinomial probit choice models.
//!
//! This crate simulates discrete-choice data from a latent-utility model,
//! calibrates the taste parameters and the differenced utility covariance
//! with an amortized variational encoder trained through argmax surrogates,
//! and validates the result against a Gibbs-sampling baseline.
//!
//! The main entry points are:
//! * [`sim::simulate`] — draw a dataset from a known ground truth;
//! * [`train::fit`] — variational calibration with a chosen surrogate;
//! * [`gibbs::gibbs_fit`] — the MCMC reference implementation;
//! * [`eval`] — choice-probability metrics and parameter recovery;
//! * [`files`] — the on-disk formats shared with the command-line tool.

pub mod autodiff;
pub mod encoder;
pub mod eval;
pub mod files;
pub mod gibbs;
pub mod loss;
pub mod matrix;
pub mod model;
pub mod rng;
pub mod sim;
pub mod surrogate;
pub mod train;
