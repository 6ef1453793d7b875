//! Bayesian calibration of imperfect computer models.
//!
//! The library fits the model
//!
//! ```text
//! y(x) = f(x, theta) + delta(x) + h(x) theta_m + eps,   eps ~ N(0, sigma0^2 / w(x))
//! ```
//!
//! where `f` is a (possibly expensive) simulator, `delta` is a model
//! discrepancy that can be switched off, modelled as a Gaussian stochastic
//! process (GaSP), or as a scaled GaSP whose random L2 distance from zero is
//! shrunk toward small values (S-GaSP), and `h(x) theta_m` is an optional
//! linear trend. Inference over the calibration parameters `theta`, the
//! kernel range/nugget parameters and the noise variance is available both
//! by posterior sampling (Metropolis within Gibbs) and by maximum profile
//! likelihood. Simulators may be bound as closures, or replaced by a GP
//! emulator fitted to a limited number of runs.
//!
//! The main entry points are [`model::CalibrationProblem`],
//! [`inference::run_mcmc`], [`inference::run_mle`], [`predict::predict_posterior`],
//! [`emulator::fit_ppgasp`] and [`multisource::MultiSourceProblem`].

pub mod emulator;
pub mod error;
pub mod inference;
pub mod kernels;
pub mod model;
pub mod multisource;
pub mod predict;
pub mod testbeds;
pub(crate) mod util;

pub use error::{CalibError, Result};
