//! Profile likelihoods for the three discrepancy settings.
//!
//! All variants share one structure. Collapse replicates to their means
//! `ybar` and let `ystar = ybar - f(X, theta)`. With the aggregated noise
//! correlation `Lam` (diagonal `1/(k_i w_i)`) the marginal covariance of
//! `ystar` is `sigma0^2 * C` where
//!
//! * no discrepancy: `C = Lam`
//! * GaSP:           `C = R / eta + Lam`
//! * S-GaSP:         `C = R_z / eta + Lam`
//!
//! with `eta = sigma0^2 / sigma^2` the nugget-to-signal ratio. Profiling the
//! trend by generalized least squares and the variance by its MLE
//! `sigma0_hat^2 = (S_K^2 + S_f^2) / N` leaves
//!
//! ```text
//! l(theta, gamma, eta) = -1/2 log|C| - N/2 log(S_K^2 + S_f^2)
//! ```
//!
//! up to an additive constant, where `S_K^2 = min_m (ystar - H m)' C^{-1}
//! (ystar - H m)` and `S_f^2` is the within-replicate weighted sum of squares.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{CalibError, Result};
use crate::kernels::{
    chol_log_det, chol_with_jitter, corr_matrix_raw, scaled_corr_raw, RangeParams,
    ScaledCorrelation,
};
use crate::model::problem::{CalibrationProblem, DiscrepancyType, LambdaZ};

/// Smallest total sum of squares treated as a genuine residual; below this
/// the fit is flagged degenerate and the likelihood is clamped instead of
/// overflowing to infinity.
const DEGENERATE_SS: f64 = 1e-300;

/// Output of a profile likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    /// Profile log likelihood up to an additive constant.
    pub loglik: f64,
    /// Generalized least squares trend coefficients (length 0 without trend).
    pub trend_hat: DVector<f64>,
    /// Variance MLE `(S_K^2 + S_f^2) / N`.
    pub sigma0_sq_hat: f64,
    /// Residual quadratic form at the profiled trend.
    pub s_k_sq: f64,
    /// Set when the residual sum of squares underflowed and the returned
    /// log likelihood is the clamped guard value.
    pub degenerate: bool,
    /// The scaling parameter actually used (S-GaSP only).
    pub lambda_z: Option<f64>,
    /// Diagonal jitter the covariance factorization needed, 0 if none.
    pub jitter: f64,
}

/// Covariance operator of the aggregated residuals: dense factorization for
/// the GP discrepancies, plain diagonal without one.
pub(crate) enum CovOp {
    Dense { chol: Cholesky<f64, Dyn>, log_det: f64, jitter: f64 },
    Diagonal { diag: DVector<f64>, log_det: f64 },
}

impl CovOp {
    pub(crate) fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            CovOp::Dense { chol, .. } => chol.solve(v),
            CovOp::Diagonal { diag, .. } => v.component_div(diag),
        }
    }

    pub(crate) fn solve_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            CovOp::Dense { chol, .. } => chol.solve(m),
            CovOp::Diagonal { diag, .. } => {
                let mut out = m.clone();
                for j in 0..out.ncols() {
                    for i in 0..out.nrows() {
                        out[(i, j)] /= diag[i];
                    }
                }
                out
            }
        }
    }

    pub(crate) fn quad(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve_vec(v))
    }

    pub(crate) fn log_det(&self) -> f64 {
        match self {
            CovOp::Dense { log_det, .. } => *log_det,
            CovOp::Diagonal { log_det, .. } => *log_det,
        }
    }

    pub(crate) fn jitter(&self) -> f64 {
        match self {
            CovOp::Dense { jitter, .. } => *jitter,
            CovOp::Diagonal { .. } => 0.0,
        }
    }
}

/// Assembled covariance pieces for one set of kernel parameters.
pub(crate) struct CovParts {
    /// Base correlation matrix R (absent without a GP discrepancy).
    pub r: Option<DMatrix<f64>>,
    /// Scaled-kernel quantities (S-GaSP only).
    pub scaled: Option<ScaledCorrelation>,
    pub cov: CovOp,
    pub lambda_z: Option<f64>,
}

pub(crate) fn build_cov(
    problem: &CalibrationProblem,
    discrepancy: DiscrepancyType,
    gamma: Option<&RangeParams>,
    eta: Option<f64>,
    lambda_z_override: Option<f64>,
) -> Result<CovParts> {
    let lam = problem.stats().lambda_diag();
    let n = problem.n();
    match discrepancy {
        DiscrepancyType::NoDiscrepancy => {
            let log_det = lam.iter().map(|v| v.ln()).sum();
            Ok(CovParts {
                r: None,
                scaled: None,
                cov: CovOp::Diagonal { diag: lam, log_det },
                lambda_z: None,
            })
        }
        DiscrepancyType::Gasp | DiscrepancyType::Sgasp => {
            let gamma = gamma.ok_or_else(|| {
                CalibError::invalid("GP discrepancy likelihood needs range parameters")
            })?;
            let eta = eta.ok_or_else(|| {
                CalibError::invalid("GP discrepancy likelihood needs a nugget ratio eta")
            })?;
            if !(eta.is_finite() && eta > 0.0) {
                return Err(CalibError::invalid(format!(
                    "eta must be finite and positive, got {eta}"
                )));
            }
            let r = corr_matrix_raw(problem.design(), problem.kernel(), gamma)?;
            let (kernel_part, scaled, lambda_z) = if discrepancy == DiscrepancyType::Sgasp {
                let lz = match lambda_z_override {
                    Some(v) => v,
                    None => match problem.lambda_z_setting() {
                        LambdaZ::Fixed(v) => v,
                        LambdaZ::Auto => {
                            default_lambda_z(gamma, eta, n, problem.domain_lengths())?
                        }
                    },
                };
                let sc = scaled_corr_raw(&r, lz)?;
                (sc.matrix().clone(), Some(sc), Some(lz))
            } else {
                (r.clone(), None, None)
            };
            let mut cov = kernel_part / eta;
            for i in 0..n {
                cov[(i, i)] += lam[i];
            }
            let (chol, jitter) = chol_with_jitter(&cov, "marginal residual covariance")?;
            let log_det = chol_log_det(&chol);
            Ok(CovParts {
                r: Some(r),
                scaled,
                cov: CovOp::Dense { chol, log_det, jitter },
                lambda_z,
            })
        }
    }
}

/// Default S-GaSP scale: `lambda_z = (lambda * ||gamma_scaled||)^{-1/2}` with
/// `lambda = eta / n` and `gamma_scaled_l = gamma_l / L_l` for design column
/// ranges `L_l`.
pub fn default_lambda_z(
    gamma: &RangeParams,
    eta: f64,
    n: usize,
    domain_lengths: &[f64],
) -> Result<f64> {
    if n == 0 {
        return Err(CalibError::invalid("lambda_z default needs n >= 1"));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(CalibError::invalid(format!("eta must be finite and positive, got {eta}")));
    }
    if domain_lengths.len() != gamma.dim() {
        return Err(CalibError::dim(format!(
            "{} domain lengths for {} range parameters",
            domain_lengths.len(),
            gamma.dim()
        )));
    }
    let mut norm_sq = 0.0;
    for (g, len) in gamma.gamma().iter().zip(domain_lengths) {
        if !(len.is_finite() && *len > 0.0) {
            return Err(CalibError::invalid("domain lengths must be finite and positive"));
        }
        let s = g / len;
        norm_sq += s * s;
    }
    let lambda = eta / n as f64;
    let lz = 1.0 / (lambda * norm_sq.sqrt()).sqrt();
    if !lz.is_finite() || lz <= 0.0 {
        return Err(CalibError::NonFinite("default lambda_z".into()));
    }
    Ok(lz)
}

/// Weighted least squares trend coefficients for diagonal precision weights:
/// solves `(H' diag(prec) H) m = H' diag(prec) residual`.
pub fn trend_lse(
    h: &DMatrix<f64>,
    precisions: &DVector<f64>,
    residual: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = h.nrows();
    if precisions.len() != n || residual.len() != n {
        return Err(CalibError::dim("trend_lse: inconsistent row counts"));
    }
    let mut hw = h.clone();
    for j in 0..hw.ncols() {
        for i in 0..n {
            hw[(i, j)] *= precisions[i];
        }
    }
    let hth = h.transpose() * &hw;
    let chol = Cholesky::new(hth)
        .ok_or_else(|| CalibError::invalid("trend basis is rank deficient under these weights"))?;
    Ok(chol.solve(&(hw.transpose() * residual)))
}

/// Core of every profile likelihood: GLS trend, residual quadratic form and
/// the variance MLE for a given covariance operator.
fn profile_core(
    cov: &CovOp,
    trend: Option<&DMatrix<f64>>,
    y_star: &DVector<f64>,
    n_total: usize,
    s_f_sq: f64,
) -> Result<(DVector<f64>, f64, f64, f64, bool)> {
    let (trend_hat, s_k_sq) = match trend {
        Some(h) => {
            let ih = cov.solve_mat(h);
            let hih = h.transpose() * &ih;
            let cholq = Cholesky::new(hih).ok_or_else(|| {
                CalibError::invalid("trend precision matrix is not positive definite")
            })?;
            let th = cholq.solve(&(ih.transpose() * y_star));
            let v = y_star - h * &th;
            (th, cov.quad(&v).max(0.0))
        }
        None => (DVector::zeros(0), cov.quad(y_star).max(0.0)),
    };
    let total = s_k_sq + s_f_sq;
    let degenerate = !(total > DEGENERATE_SS);
    let total_used = total.max(DEGENERATE_SS);
    let n = n_total as f64;
    let loglik = -0.5 * cov.log_det() - 0.5 * n * total_used.ln();
    if !loglik.is_finite() {
        return Err(CalibError::NonFinite("profile log likelihood".into()));
    }
    Ok((trend_hat, total / n, s_k_sq, loglik, degenerate))
}

fn eval_with_parts(
    problem: &CalibrationProblem,
    theta: &[f64],
    parts: &CovParts,
) -> Result<LikelihoodEval> {
    if theta.len() != problem.p_theta() {
        return Err(CalibError::dim(format!(
            "theta has {} entries, problem expects {}",
            theta.len(),
            problem.p_theta()
        )));
    }
    let f = problem.simulator().eval(problem.design(), theta)?;
    let y_star = problem.stats().means.clone() - f;
    let (trend_hat, sigma0_sq_hat, s_k_sq, loglik, degenerate) = profile_core(
        &parts.cov,
        problem.trend(),
        &y_star,
        problem.stats().n_total,
        problem.stats().s_f_sq,
    )?;
    Ok(LikelihoodEval {
        loglik,
        trend_hat,
        sigma0_sq_hat,
        s_k_sq,
        degenerate,
        lambda_z: parts.lambda_z,
        jitter: parts.cov.jitter(),
    })
}

/// Profile log likelihood without discrepancy. When `theta_m` is given the
/// trend is held at that value instead of profiled out.
pub fn no_disc_profile_loglik(
    problem: &CalibrationProblem,
    theta: &[f64],
    theta_m: Option<&DVector<f64>>,
) -> Result<LikelihoodEval> {
    let parts = build_cov(problem, DiscrepancyType::NoDiscrepancy, None, None, None)?;
    match (theta_m, problem.trend()) {
        (Some(m), Some(h)) => {
            if m.len() != h.ncols() {
                return Err(CalibError::dim("theta_m length does not match trend basis"));
            }
            let f = problem.simulator().eval(problem.design(), theta)?;
            let y_star = problem.stats().means.clone() - f - h * m;
            let (_, sigma0_sq_hat, s_k_sq, loglik, degenerate) =
                profile_core(&parts.cov, None, &y_star, problem.stats().n_total, problem.stats().s_f_sq)?;
            Ok(LikelihoodEval {
                loglik,
                trend_hat: m.clone(),
                sigma0_sq_hat,
                s_k_sq,
                degenerate,
                lambda_z: None,
                jitter: 0.0,
            })
        }
        (Some(_), None) => {
            Err(CalibError::invalid("theta_m given but the problem has no trend basis"))
        }
        (None, _) => eval_with_parts(problem, theta, &parts),
    }
}

/// GaSP-discrepancy profile log likelihood at explicit kernel parameters.
/// Uses the problem's data, kernel spec and trend; `problem.discrepancy()`
/// is not consulted so limits can be compared directly.
pub fn gasp_profile_loglik(
    problem: &CalibrationProblem,
    theta: &[f64],
    gamma: &RangeParams,
    eta: f64,
) -> Result<LikelihoodEval> {
    let parts = build_cov(problem, DiscrepancyType::Gasp, Some(gamma), Some(eta), None)?;
    eval_with_parts(problem, theta, &parts)
}

/// S-GaSP profile log likelihood. `lambda_z = None` uses the problem setting
/// (fixed value or the default formula at these kernel parameters).
pub fn sgasp_profile_loglik(
    problem: &CalibrationProblem,
    theta: &[f64],
    gamma: &RangeParams,
    eta: f64,
    lambda_z: Option<f64>,
) -> Result<LikelihoodEval> {
    let parts = build_cov(problem, DiscrepancyType::Sgasp, Some(gamma), Some(eta), lambda_z)?;
    eval_with_parts(problem, theta, &parts)
}

/// Dispatch on the problem's discrepancy type. GP discrepancies require
/// `kernel_params = (gamma, eta)`; the no-discrepancy model ignores them.
pub fn profile_loglik(
    problem: &CalibrationProblem,
    theta: &[f64],
    kernel_params: Option<(&RangeParams, f64)>,
) -> Result<LikelihoodEval> {
    match problem.discrepancy() {
        DiscrepancyType::NoDiscrepancy => no_disc_profile_loglik(problem, theta, None),
        DiscrepancyType::Gasp => {
            let (g, e) = kernel_params.ok_or_else(|| {
                CalibError::invalid("GaSP likelihood needs kernel parameters (gamma, eta)")
            })?;
            gasp_profile_loglik(problem, theta, g, e)
        }
        DiscrepancyType::Sgasp => {
            let (g, e) = kernel_params.ok_or_else(|| {
                CalibError::invalid("S-GaSP likelihood needs kernel parameters (gamma, eta)")
            })?;
            sgasp_profile_loglik(problem, theta, g, e, None)
        }
    }
}

/// Alias emphasizing that replicated designs enter through their sufficient
/// statistics; identical to [`profile_loglik`].
pub fn replicate_profile_loglik(
    problem: &CalibrationProblem,
    theta: &[f64],
    kernel_params: Option<(&RangeParams, f64)>,
) -> Result<LikelihoodEval> {
    profile_loglik(problem, theta, kernel_params)
}

/// GLS trend coefficients and variance MLE under the GaSP covariance at
/// explicit kernel parameters: `(theta_m_hat, sigma0_sq_hat)`.
pub fn gasp_trend_sigma_mle(
    problem: &CalibrationProblem,
    theta: &[f64],
    gamma: &RangeParams,
    eta: f64,
) -> Result<(DVector<f64>, f64)> {
    let eval = gasp_profile_loglik(problem, theta, gamma, eta)?;
    Ok((eval.trend_hat, eval.sigma0_sq_hat))
}
