//! Prediction of the reality at new inputs from posterior samples or an MLE
//! fit.
//!
//! Three nested predictors are reported for each test input: the computer
//! model alone, the computer model plus trend, and the full mean adding the
//! discrepancy update
//!
//! ```text
//! f(x*, theta) + h(x*)' theta_m + r*(x*)' C^{-1} (y - f - H theta_m) / eta
//! ```
//!
//! with `C` the marginal residual correlation and `r*` the (plain or scaled)
//! cross correlation. Posterior prediction averages the per-draw conditional
//! means; intervals come from per-draw Gaussian draws of the reality (or of
//! a new data point), summarized by empirical type-7 quantiles. Plug-in
//! prediction evaluates the same formulas at a single parameter point and
//! uses normal quantiles instead.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{CalibError, Result};
use crate::inference::{MleResult, PosteriorSamples};
use crate::kernels::{cross_corr, RangeParams};
use crate::model::{build_cov, CovParts, CalibrationProblem, DiscrepancyType};
use crate::util::inv_normal_cdf;

/// Which interval to report and at which probabilities.
#[derive(Debug, Clone)]
pub struct IntervalSpec {
    /// Ascending probabilities in (0, 1), e.g. `[0.025, 0.975]`.
    pub probs: Vec<f64>,
    /// Interval for a new data point (adds measurement noise) instead of
    /// for the reality.
    pub include_noise: bool,
}

impl IntervalSpec {
    pub fn central95() -> Self {
        IntervalSpec { probs: vec![0.025, 0.975], include_noise: false }
    }

    fn validate(&self) -> Result<()> {
        if self.probs.is_empty() {
            return Err(CalibError::invalid("interval probabilities are empty"));
        }
        if self.probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(CalibError::invalid("interval probabilities must lie in (0, 1)"));
        }
        if self.probs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CalibError::invalid("interval probabilities must be ascending"));
        }
        Ok(())
    }
}

/// Predictions at test inputs; one entry per test row.
#[derive(Debug, Clone)]
pub struct PredictionResult {
    /// Computer model alone.
    pub math_model: DVector<f64>,
    /// Computer model plus trend (equals `math_model` without a trend).
    pub math_model_trend: DVector<f64>,
    /// Full predictive mean of the reality.
    pub mean: DVector<f64>,
    /// Discrepancy update, `mean - math_model_trend`.
    pub discrepancy: DVector<f64>,
    pub probs: Vec<f64>,
    /// Interval bounds, one row per test input and one column per
    /// probability; `None` when no interval was requested.
    pub bounds: Option<DMatrix<f64>>,
    /// The bounds describe a new data point rather than the reality.
    pub interval_data: bool,
    /// Noise precision weights at the test inputs.
    pub testing_weights: Vec<f64>,
    /// Posterior draws skipped because the simulator failed there.
    pub skipped_draws: usize,
}

/// Empirical type-7 quantiles per test point: `draws` holds one row per
/// sample and one column per test point; the result has one row per test
/// point and one column per probability.
pub fn interval_quantiles(draws: &DMatrix<f64>, probs: &[f64]) -> Result<DMatrix<f64>> {
    if draws.nrows() == 0 {
        return Err(CalibError::invalid("no draws to take quantiles of"));
    }
    if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return Err(CalibError::invalid("quantile probabilities must lie in (0, 1)"));
    }
    let mut out = DMatrix::<f64>::zeros(draws.ncols(), probs.len());
    let mut col = vec![0.0; draws.nrows()];
    for t in 0..draws.ncols() {
        for (i, v) in draws.column(t).iter().enumerate() {
            col[i] = *v;
        }
        col.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
        for (j, p) in probs.iter().enumerate() {
            out[(t, j)] = crate::util::quantile_sorted(&col, *p);
        }
    }
    Ok(out)
}

struct TestSetup<'a> {
    testing_input: &'a DMatrix<f64>,
    testing_trend: Option<&'a DMatrix<f64>>,
    weights: Vec<f64>,
    /// `[design; testing]` stacked rows so one simulator call per draw
    /// covers both.
    stacked: DMatrix<f64>,
}

fn validate_testing<'a>(
    problem: &CalibrationProblem,
    testing_input: &'a DMatrix<f64>,
    testing_trend: Option<&'a DMatrix<f64>>,
    testing_weights: Option<&[f64]>,
) -> Result<TestSetup<'a>> {
    let m = testing_input.nrows();
    if m == 0 {
        return Err(CalibError::invalid("testing input has no rows"));
    }
    if testing_input.ncols() != problem.p_x() {
        return Err(CalibError::dim(format!(
            "testing input has {} columns, design has {}",
            testing_input.ncols(),
            problem.p_x()
        )));
    }
    if testing_input.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::NonFinite("testing input".into()));
    }
    match (problem.trend(), testing_trend) {
        (Some(h), Some(ht)) => {
            if ht.nrows() != m || ht.ncols() != h.ncols() {
                return Err(CalibError::dim(format!(
                    "testing trend is {}x{}, expected {}x{}",
                    ht.nrows(),
                    ht.ncols(),
                    m,
                    h.ncols()
                )));
            }
        }
        (Some(_), None) => {
            return Err(CalibError::invalid(
                "the fit used a trend basis; supply the trend values at the testing inputs",
            ))
        }
        (None, Some(_)) => {
            return Err(CalibError::invalid(
                "testing trend supplied but the fit used no trend basis",
            ))
        }
        (None, None) => {}
    }
    let weights = match testing_weights {
        Some(w) => {
            if w.len() != m {
                return Err(CalibError::dim(format!(
                    "{} testing weights for {m} testing rows",
                    w.len()
                )));
            }
            if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(CalibError::invalid("testing weights must be finite and positive"));
            }
            w.to_vec()
        }
        None => vec![1.0; m],
    };
    let n = problem.n();
    let p = problem.p_x();
    let design = problem.design();
    let stacked = DMatrix::from_fn(n + m, p, |i, j| {
        if i < n {
            design[(i, j)]
        } else {
            testing_input[(i - n, j)]
        }
    });
    Ok(TestSetup { testing_input, testing_trend, weights, stacked })
}

struct DrawParams {
    theta: Vec<f64>,
    gamma: Option<RangeParams>,
    eta: Option<f64>,
    sigma0_sq: f64,
    theta_m: DVector<f64>,
    lambda_z: Option<f64>,
}

/// Conditional means and reality variances for one parameter draw.
struct DrawPrediction {
    f_test: DVector<f64>,
    mmt: DVector<f64>,
    full: DVector<f64>,
    /// Reality variance per test point (zero without a GP discrepancy).
    var: DVector<f64>,
}

fn predict_one_draw(
    problem: &CalibrationProblem,
    setup: &TestSetup,
    params: &DrawParams,
    want_var: bool,
) -> Result<DrawPrediction> {
    let n = problem.n();
    let m = setup.testing_input.nrows();
    let sim_out = problem.simulator().eval(&setup.stacked, &params.theta)?;
    let f_design = DVector::from_fn(n, |i, _| sim_out[i]);
    let f_test = DVector::from_fn(m, |i, _| sim_out[n + i]);

    let mut resid = &problem.stats().means - &f_design;
    let mut mmt = f_test.clone();
    if let (Some(h), Some(ht)) = (problem.trend(), setup.testing_trend) {
        resid -= h * &params.theta_m;
        mmt += ht * &params.theta_m;
    }

    let disc = problem.discrepancy();
    if disc == DiscrepancyType::NoDiscrepancy {
        return Ok(DrawPrediction {
            f_test,
            full: mmt.clone(),
            mmt,
            var: DVector::zeros(m),
        });
    }

    let gamma = params.gamma.as_ref().expect("GP draw carries kernel parameters");
    let eta = params.eta.expect("GP draw carries a nugget ratio");
    let parts: CovParts = build_cov(problem, disc, Some(gamma), Some(eta), params.lambda_z)?;
    let r_design = parts.r.as_ref().expect("GP covariance keeps the base correlation");

    // cross correlations (scaled for S-GaSP) and self correlations
    let mut rc = DMatrix::<f64>::zeros(n, m);
    let mut k_self = DVector::<f64>::from_element(m, 1.0);
    let mut x = vec![0.0; setup.testing_input.ncols()];
    for t in 0..m {
        for (j, v) in x.iter_mut().enumerate() {
            *v = setup.testing_input[(t, j)];
        }
        let r = cross_corr(problem.design(), &x, problem.kernel(), gamma)?;
        match &parts.scaled {
            Some(sc) => {
                k_self[t] = sc.self_corr(&r);
                rc.set_column(t, &sc.cross_vec(r_design, &r));
            }
            None => rc.set_column(t, &r),
        }
    }

    let w = parts.cov.solve_vec(&resid);
    let update = rc.tr_mul(&w) / eta;
    let full = &mmt + &update;

    let var = if want_var {
        let s = parts.cov.solve_mat(&rc);
        DVector::from_fn(m, |t, _| {
            let quad = rc.column(t).dot(&s.column(t)) / eta;
            (params.sigma0_sq * (k_self[t] - quad) / eta).max(0.0)
        })
    } else {
        DVector::zeros(m)
    };
    Ok(DrawPrediction { f_test, mmt, full, var })
}

fn draw_params_at(samples: &PosteriorSamples, row: usize) -> DrawParams {
    let (gamma, eta) = match samples.kernel_at(row) {
        Some((g, e)) => (Some(g), Some(e)),
        None => (None, None),
    };
    DrawParams {
        theta: samples.theta_at(row),
        gamma,
        eta,
        sigma0_sq: samples.sigma0_sq_at(row),
        theta_m: samples.trend_at(row),
        lambda_z: samples.lambda_z_at(row),
    }
}

/// Posterior prediction: average the conditional mean over retained draws
/// and, when requested, build intervals from per-draw Gaussian draws.
pub fn predict_posterior(
    problem: &CalibrationProblem,
    samples: &PosteriorSamples,
    testing_input: &DMatrix<f64>,
    testing_trend: Option<&DMatrix<f64>>,
    testing_weights: Option<&[f64]>,
    interval: Option<&IntervalSpec>,
    seed: u64,
) -> Result<PredictionResult> {
    if samples.n_draws() == 0 {
        return Err(CalibError::invalid("posterior sample set is empty"));
    }
    if samples.p_theta != problem.p_theta() || samples.discrepancy != problem.discrepancy() {
        return Err(CalibError::invalid(
            "posterior samples do not match the problem (parameter count or discrepancy type)",
        ));
    }
    if let Some(spec) = interval {
        spec.validate()?;
    }
    let setup = validate_testing(problem, testing_input, testing_trend, testing_weights)?;
    let m = testing_input.nrows();
    let want_var = interval.is_some();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut sum_f = DVector::<f64>::zeros(m);
    let mut sum_mmt = DVector::<f64>::zeros(m);
    let mut sum_full = DVector::<f64>::zeros(m);
    let mut interval_draws =
        interval.map(|_| DMatrix::<f64>::zeros(samples.n_draws(), m));
    let mut used = 0usize;
    let mut skipped = 0usize;

    for row in 0..samples.n_draws() {
        let params = draw_params_at(samples, row);
        let pred = match predict_one_draw(problem, &setup, &params, want_var) {
            Ok(p) => p,
            Err(CalibError::Simulator(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        sum_f += &pred.f_test;
        sum_mmt += &pred.mmt;
        sum_full += &pred.full;
        if let (Some(draws), Some(spec)) = (interval_draws.as_mut(), interval) {
            for t in 0..m {
                let mut v = pred.var[t];
                if spec.include_noise {
                    v += params.sigma0_sq / setup.weights[t];
                }
                let z: f64 = rng.sample(StandardNormal);
                draws[(used, t)] = pred.full[t] + v.sqrt() * z;
            }
        }
        used += 1;
    }
    if used == 0 {
        return Err(CalibError::Simulator(format!(
            "the simulator failed at every one of the {} posterior draws",
            samples.n_draws()
        )));
    }

    let scale = 1.0 / used as f64;
    let math_model = sum_f * scale;
    let math_model_trend = sum_mmt * scale;
    let mean = sum_full * scale;
    let discrepancy = &mean - &math_model_trend;

    let (probs, bounds, interval_data) = match interval {
        Some(spec) => {
            let draws = interval_draws.expect("allocated with the interval");
            let draws = draws.rows(0, used).into_owned();
            (spec.probs.clone(), Some(interval_quantiles(&draws, &spec.probs)?), spec.include_noise)
        }
        None => (Vec::new(), None, false),
    };
    Ok(PredictionResult {
        math_model,
        math_model_trend,
        mean,
        discrepancy,
        probs,
        bounds,
        interval_data,
        testing_weights: setup.weights,
        skipped_draws: skipped,
    })
}

/// Plug-in prediction at a point estimate, with normal-quantile intervals.
pub fn predict_plugin(
    problem: &CalibrationProblem,
    fit: &MleResult,
    testing_input: &DMatrix<f64>,
    testing_trend: Option<&DMatrix<f64>>,
    testing_weights: Option<&[f64]>,
    interval: Option<&IntervalSpec>,
) -> Result<PredictionResult> {
    if let Some(spec) = interval {
        spec.validate()?;
    }
    let setup = validate_testing(problem, testing_input, testing_trend, testing_weights)?;
    let params = DrawParams {
        theta: fit.theta.clone(),
        gamma: fit.gamma.clone(),
        eta: fit.eta,
        sigma0_sq: fit.sigma0_sq,
        theta_m: fit.trend.clone(),
        lambda_z: fit.lambda_z,
    };
    let pred = predict_one_draw(problem, &setup, &params, interval.is_some())?;
    let m = testing_input.nrows();
    let (probs, bounds, interval_data) = match interval {
        Some(spec) => {
            let mut b = DMatrix::<f64>::zeros(m, spec.probs.len());
            for t in 0..m {
                let mut v = pred.var[t];
                if spec.include_noise {
                    v += fit.sigma0_sq / setup.weights[t];
                }
                let sd = v.sqrt();
                for (j, p) in spec.probs.iter().enumerate() {
                    b[(t, j)] = pred.full[t] + sd * inv_normal_cdf(*p);
                }
            }
            (spec.probs.clone(), Some(b), spec.include_noise)
        }
        None => (Vec::new(), None, false),
    };
    Ok(PredictionResult {
        math_model: pred.f_test,
        math_model_trend: pred.mmt.clone(),
        mean: pred.full.clone(),
        discrepancy: &pred.full - &pred.mmt,
        probs,
        bounds,
        interval_data,
        testing_weights: setup.weights,
        skipped_draws: 0,
    })
}
