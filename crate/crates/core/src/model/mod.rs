//! Calibration problem definition and profile likelihoods.

mod gradient;
mod likelihood;
mod problem;

pub use gradient::{profile_grad, value_and_grad};
pub use likelihood::{
    default_lambda_z, gasp_profile_loglik, gasp_trend_sigma_mle, no_disc_profile_loglik,
    profile_loglik, replicate_profile_loglik, sgasp_profile_loglik, trend_lse, LikelihoodEval,
};
pub use problem::{
    replicate_stats, CalibrationProblem, CalibrationProblemBuilder, DiscrepancyType, LambdaZ,
    Observations, ReplicateStats, SimulatorBinding,
};

pub(crate) use likelihood::{build_cov, CovOp, CovParts};
