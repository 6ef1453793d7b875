//! Posterior sampling and maximum likelihood estimation.

pub(crate) mod lbfgs;
mod mcmc;
mod mle;
mod prior;

pub use mcmc::{
    gibbs_sigma0, gibbs_trend, run_mcmc, McmcConfig, PosteriorSamples,
};
pub use mle::{run_mle, MleConfig, MleResult, StartRecord};
pub use prior::JrPrior;
