//! Calibration against several sources of observations that share the
//! calibration parameter.
//!
//! Each source l has its own design, observations, computer model and
//! kernel. Without measurement bias the sources are independent given theta
//! and the joint likelihood is the sum of single-source marginal
//! likelihoods. With measurement bias all sources observe the same design
//! and decompose as
//!
//! ```text
//! y_l = f_l(X, theta) + delta(X) + delta_l(X) + mu_l + eps_l
//! ```
//!
//! with a shared discrepancy `delta` and source-specific biases `delta_l`.
//! The sampler draws `delta` explicitly at the shared design from its
//! Gaussian full conditional (each bias `delta_l` stays marginalized inside
//! its source's covariance), so the per-iteration cost stays at k
//! factorizations of n x n matrices instead of one of kn x kn.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CalibError, Result};
use crate::inference::{gibbs_sigma0, JrPrior, McmcConfig};
use crate::kernels::{
    chol_with_jitter, corr_matrix_raw, cross_corr, scaled_corr_raw, KernelFamily, KernelSpec,
    RangeParams, ScaledCorrelation,
};
use crate::model::{
    build_cov, CalibrationProblem, CovParts, DiscrepancyType, Observations, SimulatorBinding,
};

/// One observation source.
pub struct SourceSpec {
    pub design: DMatrix<f64>,
    pub observations: Observations,
    pub simulator: SimulatorBinding,
    /// Positions of the global theta entries this source's simulator takes,
    /// in the order the simulator expects them.
    pub index_theta: Vec<usize>,
    /// Kernel model of this source's correlated term (the source discrepancy
    /// without measurement bias, the measurement bias with it).
    pub discrepancy: DiscrepancyType,
    pub kernel: Option<KernelSpec>,
    /// Estimate a constant source mean `mu_l`.
    pub trend: bool,
    pub output_weights: Option<Vec<f64>>,
}

/// A multi-source calibration problem. Internally each source becomes a
/// single-source problem over the full global theta, with the simulator
/// routing the `index_theta` entries into the source model.
pub struct MultiSourceProblem {
    sources: Vec<CalibrationProblem>,
    index_theta: Vec<Vec<usize>>,
    theta_range: Vec<(f64, f64)>,
    measurement_bias: bool,
    shared_design: Option<DMatrix<f64>>,
    shared_discrepancy: DiscrepancyType,
    shared_kernel: Option<KernelSpec>,
    /// Test hook: hold every source's nugget ratio fixed at this value
    /// instead of sampling it. Large values force the bias variance
    /// `sigma_l^2 = sigma0l^2 / eta_l` toward zero.
    fixed_source_eta: Option<f64>,
}

fn route_simulator(inner: SimulatorBinding, index: Vec<usize>) -> SimulatorBinding {
    SimulatorBinding::full_design(move |design, theta_global| {
        let sub: Vec<f64> = index.iter().map(|i| theta_global[*i]).collect();
        inner.eval(design, &sub)
    })
}

impl MultiSourceProblem {
    pub fn new(
        sources: Vec<SourceSpec>,
        theta_range: Vec<(f64, f64)>,
        measurement_bias: bool,
        shared_discrepancy: DiscrepancyType,
        shared_kernel: Option<KernelSpec>,
    ) -> Result<MultiSourceProblem> {
        if sources.is_empty() {
            return Err(CalibError::invalid("need at least one source"));
        }
        let p_theta = theta_range.len();
        let mut built = Vec::with_capacity(sources.len());
        let mut index_theta = Vec::with_capacity(sources.len());
        let mut shared_design: Option<DMatrix<f64>> = None;
        for (l, spec) in sources.into_iter().enumerate() {
            if spec.index_theta.iter().any(|i| *i >= p_theta) {
                return Err(CalibError::invalid(format!(
                    "source {l}: index_theta entry exceeds the {p_theta} global parameters"
                )));
            }
            if measurement_bias {
                match &shared_design {
                    None => shared_design = Some(spec.design.clone()),
                    Some(d) => {
                        if d != &spec.design {
                            return Err(CalibError::invalid(
                                "measurement bias requires every source to observe the same design",
                            ));
                        }
                    }
                }
                if spec.discrepancy == DiscrepancyType::NoDiscrepancy {
                    return Err(CalibError::invalid(format!(
                        "source {l}: measurement bias needs a GP kernel for the bias term"
                    )));
                }
            }
            let routed = route_simulator(spec.simulator, spec.index_theta.clone());
            let mut b = CalibrationProblem::builder(
                spec.design,
                spec.observations,
                theta_range.clone(),
                routed,
            )
            .discrepancy(spec.discrepancy);
            if let Some(kernel) = spec.kernel {
                b = b.kernel(kernel);
            }
            if let Some(w) = spec.output_weights {
                b = b.output_weights(w);
            }
            if spec.trend {
                b = b.constant_trend();
            }
            built.push(b.build().map_err(|e| {
                CalibError::invalid(format!("source {l}: {e}"))
            })?);
            index_theta.push(spec.index_theta);
        }
        if measurement_bias && shared_discrepancy != DiscrepancyType::NoDiscrepancy {
            let d = shared_design.as_ref().expect("bias mode fixes a shared design");
            if let Some(k) = &shared_kernel {
                if k.dim() != d.ncols() {
                    return Err(CalibError::dim(format!(
                        "shared kernel covers {} dimensions, design has {}",
                        k.dim(),
                        d.ncols()
                    )));
                }
            }
        }
        Ok(MultiSourceProblem {
            sources: built,
            index_theta,
            theta_range,
            measurement_bias,
            shared_design,
            shared_discrepancy,
            shared_kernel,
            fixed_source_eta: None,
        })
    }

    pub fn with_fixed_source_eta(mut self, eta: f64) -> Self {
        self.fixed_source_eta = Some(eta);
        self
    }

    pub fn k(&self) -> usize {
        self.sources.len()
    }

    pub fn p_theta(&self) -> usize {
        self.theta_range.len()
    }

    pub fn theta_range(&self) -> &[(f64, f64)] {
        &self.theta_range
    }

    pub fn measurement_bias(&self) -> bool {
        self.measurement_bias
    }

    pub fn source(&self, l: usize) -> &CalibrationProblem {
        &self.sources[l]
    }

    pub fn index_theta(&self, l: usize) -> &[usize] {
        &self.index_theta[l]
    }

    pub fn shared_design(&self) -> Option<&DMatrix<f64>> {
        self.shared_design.as_ref()
    }

    fn theta_in_range(&self, theta: &[f64]) -> bool {
        theta.len() == self.theta_range.len()
            && theta
                .iter()
                .zip(&self.theta_range)
                .all(|(t, (lo, hi))| t.is_finite() && *t >= *lo && *t <= *hi)
    }

    fn theta_midpoint(&self) -> Vec<f64> {
        self.theta_range.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    fn shared_kernel_spec(&self) -> Result<KernelSpec> {
        let d = self
            .shared_design
            .as_ref()
            .ok_or_else(|| CalibError::invalid("no shared design"))?;
        match &self.shared_kernel {
            Some(k) => Ok(k.clone()),
            None => KernelSpec::uniform(KernelFamily::Matern52, d.ncols()),
        }
    }
}

/// Joint log likelihood without measurement bias: the sum over sources of
/// the single-source profile log likelihood (each source's correlated term
/// marginalized under its kernel). `kernel_params[l]` carries `(gamma, eta)`
/// for GP sources and `None` for no-discrepancy sources.
pub fn ms_loglik_no_bias(
    problem: &MultiSourceProblem,
    theta: &[f64],
    kernel_params: &[Option<(RangeParams, f64)>],
) -> Result<f64> {
    if problem.measurement_bias {
        return Err(CalibError::invalid(
            "ms_loglik_no_bias applies only without measurement bias",
        ));
    }
    if kernel_params.len() != problem.k() {
        return Err(CalibError::dim(format!(
            "{} kernel parameter sets for {} sources",
            kernel_params.len(),
            problem.k()
        )));
    }
    let mut total = 0.0;
    for (source, params) in problem.sources.iter().zip(kernel_params) {
        let eval = crate::model::profile_loglik(
            source,
            theta,
            params.as_ref().map(|(g, e)| (g, *e)),
        )?;
        total += eval.loglik;
    }
    Ok(total)
}

/// Posterior draws from the multi-source sampler.
pub struct MsPosterior {
    pub p_theta: usize,
    pub k: usize,
    pub measurement_bias: bool,
    pub theta: DMatrix<f64>,
    /// Per source: log inverse ranges (draws x p_x).
    pub source_log_beta: Vec<DMatrix<f64>>,
    pub source_log_eta: Vec<DVector<f64>>,
    pub source_sigma0_sq: Vec<DVector<f64>>,
    /// Per-source constant mean draws (zeros when the source has no trend).
    pub source_mu: Vec<DVector<f64>>,
    /// Shared-discrepancy kernel draws (empty without bias mode or shared GP).
    pub shared_log_beta: DMatrix<f64>,
    pub sigma_delta_sq: DVector<f64>,
    /// Retained shared-discrepancy vectors at the shared design
    /// (draws x n; empty columns without a shared GP).
    pub delta: DMatrix<f64>,
    pub accept_theta: u64,
    pub accept_source_kernel: Vec<u64>,
    pub accept_shared_kernel: u64,
    pub n_iterations: usize,
}

impl MsPosterior {
    pub fn n_draws(&self) -> usize {
        self.theta.nrows()
    }

    pub fn posterior_mean_theta(&self) -> Vec<f64> {
        (0..self.p_theta).map(|j| self.theta.column(j).mean()).collect()
    }

    pub fn acceptance_rate_theta(&self) -> f64 {
        self.accept_theta as f64 / self.n_iterations.max(1) as f64
    }
}

struct SourceState {
    log_beta: Vec<f64>,
    log_eta: f64,
    parts: CovParts,
    /// Dense inverse of the marginal correlation, kept for the delta
    /// full conditional.
    inv: Option<DMatrix<f64>>,
    sigma0_sq: f64,
    mu: f64,
    f: DVector<f64>,
    prior: JrPrior,
}

impl SourceState {
    fn residual(&self, source: &CalibrationProblem, delta: Option<&DVector<f64>>) -> DVector<f64> {
        let mut r = &source.stats().means - &self.f;
        if self.mu != 0.0 {
            r.add_scalar_mut(-self.mu);
        }
        if let Some(d) = delta {
            r -= d;
        }
        r
    }
}

fn source_kernel_target(
    state_parts: &CovParts,
    prior: &JrPrior,
    log_beta: &[f64],
    log_eta: f64,
    quad: f64,
    sigma0_sq: f64,
) -> f64 {
    let beta: Vec<f64> = log_beta.iter().map(|v| v.exp()).collect();
    -0.5 * state_parts.cov.log_det() - quad / (2.0 * sigma0_sq)
        + prior.log_density(&beta, log_eta.exp())
        + log_beta.iter().sum::<f64>()
        + log_eta
}

/// Shared-discrepancy correlation at the current kernel state. For an
/// S-GaSP shared term the scale uses the default formula with the effective
/// noise-to-signal ratio `mean(sigma0l^2) / sigma_delta^2`.
struct SharedState {
    log_beta: Vec<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_det: f64,
    scaled: Option<ScaledCorrelation>,
    sigma_sq: f64,
    prior: JrPrior,
}

fn build_shared(
    design: &DMatrix<f64>,
    kernel: &KernelSpec,
    log_beta: &[f64],
    discrepancy: DiscrepancyType,
    eta_eff: f64,
    lengths: &[f64],
) -> Result<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64, Option<ScaledCorrelation>)> {
    let gamma = RangeParams::from_log_inverse_ranges(log_beta)?;
    let r = corr_matrix_raw(design, kernel, &gamma)?;
    match discrepancy {
        DiscrepancyType::Sgasp => {
            let lz = crate::model::default_lambda_z(&gamma, eta_eff.max(1e-12), design.nrows(), lengths)?;
            let sc = scaled_corr_raw(&r, lz)?;
            let (chol, _) = chol_with_jitter(sc.matrix(), "shared scaled correlation")?;
            let log_det = 2.0 * (0..design.nrows()).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
            Ok((chol, log_det, Some(sc)))
        }
        _ => {
            let (chol, _) = chol_with_jitter(&r, "shared correlation")?;
            let log_det = 2.0 * (0..design.nrows()).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
            Ok((chol, log_det, None))
        }
    }
}

/// Draw from `N(P^{-1} rhs, P^{-1})` given the precision matrix `P`.
pub(crate) fn gibbs_gaussian_precision<R: Rng>(
    rng: &mut R,
    precision: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (chol, _) = chol_with_jitter(precision, "Gaussian full-conditional precision")?;
    let mean = chol.solve(rhs);
    let n = rhs.len();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let l = chol.l();
    let noise = l
        .tr_solve_lower_triangular(&z)
        .ok_or_else(|| CalibError::NonFinite("precision factor is singular".into()))?;
    Ok(mean + noise)
}

/// Metropolis-within-Gibbs sampler for multi-source problems, with or
/// without measurement bias. Proposal scales follow [`McmcConfig`]; a
/// `sd_proposal` vector, when given, must hold the per-coordinate theta
/// fractions only.
pub fn ms_mcmc(problem: &MultiSourceProblem, config: &McmcConfig) -> Result<MsPosterior> {
    let k = problem.k();
    let p_theta = problem.p_theta();
    if config.thinning == 0 {
        return Err(CalibError::invalid("thinning must be at least 1"));
    }
    if config.n_samples <= config.burn_in {
        return Err(CalibError::invalid(format!(
            "n_samples {} must exceed burn_in {}",
            config.n_samples, config.burn_in
        )));
    }
    let n_keep = (config.n_samples - config.burn_in) / config.thinning;
    if n_keep == 0 {
        return Err(CalibError::invalid("no retained draws: increase n_samples or lower thinning"));
    }
    let mut theta = match &config.initial_theta {
        Some(t) => {
            if !problem.theta_in_range(t) {
                return Err(CalibError::invalid("initial_theta is outside the parameter range"));
            }
            t.clone()
        }
        None => problem.theta_midpoint(),
    };
    let theta_frac: Vec<f64> = match &config.sd_proposal {
        None => vec![0.05; p_theta],
        Some(v) if v.len() == p_theta => v.clone(),
        Some(v) => {
            return Err(CalibError::invalid(format!(
                "sd_proposal must hold {p_theta} theta fractions, got {}",
                v.len()
            )))
        }
    };
    let sd_theta: Vec<f64> = theta_frac
        .iter()
        .zip(&problem.theta_range)
        .map(|(f, (lo, hi))| f * (hi - lo))
        .collect();
    if sd_theta.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(CalibError::invalid("proposal scales must be finite and positive"));
    }
    let sd_kernel = 0.25;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let bias = problem.measurement_bias;
    let shared_gp = bias && problem.shared_discrepancy != DiscrepancyType::NoDiscrepancy;
    let n_shared = problem.shared_design.as_ref().map_or(0, |d| d.nrows());

    // per-source initialization
    let mut states: Vec<SourceState> = Vec::with_capacity(k);
    for source in &problem.sources {
        let log_beta: Vec<f64> =
            source.domain_lengths().iter().map(|len| -(len / 2.0).ln()).collect();
        let log_eta = problem.fixed_source_eta.map_or(0.0, |v| v.ln());
        let gp = source.discrepancy() != DiscrepancyType::NoDiscrepancy;
        let gamma = RangeParams::from_log_inverse_ranges(&log_beta)?;
        let parts = build_cov(
            source,
            source.discrepancy(),
            if gp { Some(&gamma) } else { None },
            if gp { Some(log_eta.exp()) } else { None },
            None,
        )?;
        let inv = if bias { Some(dense_inverse(&parts)) } else { None };
        let f = source.simulator().eval(source.design(), &theta)?;
        let prior = JrPrior::default_for(source.n(), source.domain_lengths())?;
        let mut st = SourceState { log_beta, log_eta, parts, inv, sigma0_sq: 1.0, mu: 0.0, f, prior };
        let resid = st.residual(source, None);
        let quad = st.parts.cov.quad(&resid);
        let s0 = (quad + source.stats().s_f_sq) / source.stats().n_total as f64;
        st.sigma0_sq = if s0.is_finite() && s0 > 0.0 { s0 } else { 1.0 };
        states.push(st);
    }

    // shared-discrepancy initialization
    let mut delta = DVector::<f64>::zeros(n_shared);
    let mut shared: Option<SharedState> = if shared_gp {
        let design = problem.shared_design.as_ref().expect("bias mode has a shared design");
        let kernel = problem.shared_kernel_spec()?;
        let lengths: Vec<f64> = (0..design.ncols())
            .map(|j| {
                let col = design.column(j);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in col.iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect();
        let log_beta: Vec<f64> = lengths.iter().map(|len| -(len / 2.0).ln()).collect();
        let sigma_sq = states.iter().map(|s| s.sigma0_sq).sum::<f64>() / k as f64;
        let eta_eff = states.iter().map(|s| s.sigma0_sq).sum::<f64>() / k as f64 / sigma_sq;
        let (chol, log_det, scaled) = build_shared(
            design,
            &kernel,
            &log_beta,
            problem.shared_discrepancy,
            eta_eff,
            &lengths,
        )?;
        let prior = JrPrior::default_for(design.nrows(), &lengths)?;
        Some(SharedState { log_beta, chol, log_det, scaled, sigma_sq, prior })
    } else {
        None
    };
    let shared_lengths: Vec<f64> = problem.shared_design.as_ref().map_or(Vec::new(), |d| {
        (0..d.ncols())
            .map(|j| {
                let col = d.column(j);
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for v in col.iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
                if hi > lo {
                    hi - lo
                } else {
                    1.0
                }
            })
            .collect()
    });
    let shared_kernel = if shared_gp { Some(problem.shared_kernel_spec()?) } else { None };

    // storage
    let p_x_per: Vec<usize> = problem.sources.iter().map(|s| s.p_x()).collect();
    let mut out = MsPosterior {
        p_theta,
        k,
        measurement_bias: bias,
        theta: DMatrix::zeros(n_keep, p_theta),
        source_log_beta: p_x_per.iter().map(|p| DMatrix::zeros(n_keep, *p)).collect(),
        source_log_eta: vec![DVector::zeros(n_keep); k],
        source_sigma0_sq: vec![DVector::zeros(n_keep); k],
        source_mu: vec![DVector::zeros(n_keep); k],
        shared_log_beta: DMatrix::zeros(
            n_keep,
            if shared_gp { shared_lengths.len() } else { 0 },
        ),
        sigma_delta_sq: DVector::zeros(n_keep),
        delta: DMatrix::zeros(n_keep, if shared_gp { n_shared } else { 0 }),
        accept_theta: 0,
        accept_source_kernel: vec![0; k],
        accept_shared_kernel: 0,
        n_iterations: config.n_samples,
    };
    let mut kept = 0usize;

    for iter in 1..=config.n_samples {
        let delta_ref = if shared_gp { Some(&delta) } else { None };

        // global theta block
        let prop: Vec<f64> = theta
            .iter()
            .zip(&sd_theta)
            .map(|(t, s)| t + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if problem.theta_in_range(&prop) {
            let mut f_props = Vec::with_capacity(k);
            let mut log_alpha = 0.0;
            let mut ok = true;
            for (l, source) in problem.sources.iter().enumerate() {
                match source.simulator().eval(source.design(), &prop) {
                    Ok(f_new) => {
                        let st = &states[l];
                        let resid_cur = st.residual(source, delta_ref);
                        let quad_cur = st.parts.cov.quad(&resid_cur);
                        let mut resid_new = &source.stats().means - &f_new;
                        if st.mu != 0.0 {
                            resid_new.add_scalar_mut(-st.mu);
                        }
                        if let Some(d) = delta_ref {
                            resid_new -= d;
                        }
                        let quad_new = st.parts.cov.quad(&resid_new);
                        log_alpha += (quad_cur - quad_new) / (2.0 * st.sigma0_sq);
                        f_props.push(f_new);
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && rng.random::<f64>().ln() < log_alpha {
                theta = prop;
                for (st, f_new) in states.iter_mut().zip(f_props) {
                    st.f = f_new;
                }
                out.accept_theta += 1;
            }
        }

        // per-source kernel, noise and mean blocks
        for (l, source) in problem.sources.iter().enumerate() {
            let gp = source.discrepancy() != DiscrepancyType::NoDiscrepancy;
            if gp {
                let st = &states[l];
                let lb_prop: Vec<f64> = st
                    .log_beta
                    .iter()
                    .map(|b| b + sd_kernel * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let le_prop = if problem.fixed_source_eta.is_some() {
                    st.log_eta
                } else {
                    st.log_eta + sd_kernel * rng.sample::<f64, _>(StandardNormal)
                };
                let in_bounds = lb_prop.iter().all(|v| v.abs() <= 40.0) && le_prop.abs() <= 40.0;
                if in_bounds {
                    if let Ok(gamma_prop) = RangeParams::from_log_inverse_ranges(&lb_prop) {
                        if let Ok(parts_prop) = build_cov(
                            source,
                            source.discrepancy(),
                            Some(&gamma_prop),
                            Some(le_prop.exp()),
                            None,
                        ) {
                            let resid = st.residual(source, delta_ref);
                            let quad_cur = st.parts.cov.quad(&resid);
                            let quad_new = parts_prop.cov.quad(&resid);
                            let cur = source_kernel_target(
                                &st.parts, &st.prior, &st.log_beta, st.log_eta, quad_cur,
                                st.sigma0_sq,
                            );
                            let new = source_kernel_target(
                                &parts_prop, &st.prior, &lb_prop, le_prop, quad_new, st.sigma0_sq,
                            );
                            if rng.random::<f64>().ln() < new - cur {
                                let st = &mut states[l];
                                st.parts = parts_prop;
                                st.log_beta = lb_prop;
                                st.log_eta = le_prop;
                                if bias {
                                    st.inv = Some(dense_inverse(&st.parts));
                                }
                                out.accept_source_kernel[l] += 1;
                            }
                        }
                    }
                }
            }

            // noise variance
            {
                let st = &states[l];
                let resid = st.residual(source, delta_ref);
                let quad = st.parts.cov.quad(&resid);
                states[l].sigma0_sq =
                    gibbs_sigma0(&mut rng, source.stats().n_total, quad + source.stats().s_f_sq);
            }

            // constant source mean
            if source.q_trend() > 0 {
                let st = &states[l];
                let mut resid = &source.stats().means - &st.f;
                if let Some(d) = delta_ref {
                    resid -= d;
                }
                let u = st.parts.cov.solve_vec(&resid);
                let ones = DVector::from_element(source.n(), 1.0);
                let s11 = st.parts.cov.solve_vec(&ones).sum();
                if s11 > 0.0 {
                    let mean = u.sum() / s11;
                    let sd = (st.sigma0_sq / s11).sqrt();
                    states[l].mu = mean + sd * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }

        // shared-discrepancy blocks
        if let Some(sh) = shared.as_mut() {
            let n = n_shared;
            // delta full conditional
            let mut precision = sh.chol.inverse() / sh.sigma_sq;
            let mut rhs = DVector::<f64>::zeros(n);
            for (l, source) in problem.sources.iter().enumerate() {
                let st = &states[l];
                let inv = st.inv.as_ref().expect("bias mode keeps dense inverses");
                let scale = 1.0 / st.sigma0_sq;
                precision += inv * scale;
                let mut resid = &source.stats().means - &st.f;
                if st.mu != 0.0 {
                    resid.add_scalar_mut(-st.mu);
                }
                rhs += inv * resid * scale;
            }
            delta = gibbs_gaussian_precision(&mut rng, &precision, &rhs)?;

            // shared GP variance
            let quad_delta = delta.dot(&sh.chol.solve(&delta));
            let precision_draw = rand_distr::Gamma::new(n as f64 / 2.0, 2.0 / quad_delta.max(1e-300))
                .expect("positive Gamma parameters")
                .sample(&mut rng);
            sh.sigma_sq = (1.0 / precision_draw).clamp(1e-300, f64::MAX);

            // shared kernel ranges
            let lb_prop: Vec<f64> = sh
                .log_beta
                .iter()
                .map(|b| b + sd_kernel * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if lb_prop.iter().all(|v| v.abs() <= 40.0) {
                let design = problem.shared_design.as_ref().expect("bias mode");
                let kernel = shared_kernel.as_ref().expect("shared GP keeps a kernel");
                let eta_eff = states.iter().map(|s| s.sigma0_sq).sum::<f64>()
                    / k as f64
                    / sh.sigma_sq;
                if let Ok((chol_new, log_det_new, scaled_new)) = build_shared(
                    design,
                    kernel,
                    &lb_prop,
                    problem.shared_discrepancy,
                    eta_eff,
                    &shared_lengths,
                ) {
                    let quad_new = delta.dot(&chol_new.solve(&delta));
                    let quad_cur = delta.dot(&sh.chol.solve(&delta));
                    let beta_new: Vec<f64> = lb_prop.iter().map(|v| v.exp()).collect();
                    let beta_cur: Vec<f64> = sh.log_beta.iter().map(|v| v.exp()).collect();
                    let target_new = -0.5 * log_det_new - quad_new / (2.0 * sh.sigma_sq)
                        + sh.prior.log_density(&beta_new, 0.0)
                        + lb_prop.iter().sum::<f64>();
                    let target_cur = -0.5 * sh.log_det - quad_cur / (2.0 * sh.sigma_sq)
                        + sh.prior.log_density(&beta_cur, 0.0)
                        + sh.log_beta.iter().sum::<f64>();
                    if rng.random::<f64>().ln() < target_new - target_cur {
                        sh.log_beta = lb_prop;
                        sh.chol = chol_new;
                        sh.log_det = log_det_new;
                        sh.scaled = scaled_new;
                        out.accept_shared_kernel += 1;
                    }
                }
            }
        }

        // retention
        if iter > config.burn_in && (iter - config.burn_in) % config.thinning == 0 && kept < n_keep
        {
            for j in 0..p_theta {
                out.theta[(kept, j)] = theta[j];
            }
            for (l, st) in states.iter().enumerate() {
                for (j, b) in st.log_beta.iter().enumerate() {
                    out.source_log_beta[l][(kept, j)] = *b;
                }
                out.source_log_eta[l][kept] = st.log_eta;
                out.source_sigma0_sq[l][kept] = st.sigma0_sq;
                out.source_mu[l][kept] = st.mu;
            }
            if let Some(sh) = &shared {
                for (j, b) in sh.log_beta.iter().enumerate() {
                    out.shared_log_beta[(kept, j)] = *b;
                }
                out.sigma_delta_sq[kept] = sh.sigma_sq;
                for i in 0..n_shared {
                    out.delta[(kept, i)] = delta[i];
                }
            }
            kept += 1;
        }
    }
    Ok(out)
}

fn dense_inverse(parts: &CovParts) -> DMatrix<f64> {
    match &parts.cov {
        crate::model::CovOp::Dense { chol, .. } => chol.inverse(),
        crate::model::CovOp::Diagonal { diag, .. } => {
            DMatrix::from_diagonal(&diag.map(|v| 1.0 / v))
        }
    }
}

/// Sampler for problems with measurement bias (kept as a named entry point;
/// forwards to [`ms_mcmc`] after checking the flag).
pub fn ms_mcmc_bias(problem: &MultiSourceProblem, config: &McmcConfig) -> Result<MsPosterior> {
    if !problem.measurement_bias {
        return Err(CalibError::invalid("problem was built without measurement bias"));
    }
    ms_mcmc(problem, config)
}

/// Average the sources into one single-source problem on the common design.
/// The first source's simulator (with its theta routing) drives the stacked
/// model; sources must share the design and observation layout.
pub fn stack_sources(
    problem: &MultiSourceProblem,
    discrepancy: DiscrepancyType,
) -> Result<CalibrationProblem> {
    let k = problem.k();
    let first = &problem.sources[0];
    let design = first.design().clone();
    for source in &problem.sources[1..] {
        if source.design() != &design {
            return Err(CalibError::invalid("stacking requires equal designs across sources"));
        }
        if source.n() != first.n() {
            return Err(CalibError::dim("stacking requires equal observation counts"));
        }
    }
    let mut mean = DVector::<f64>::zeros(first.n());
    for source in &problem.sources {
        mean += &source.stats().means;
    }
    mean /= k as f64;
    let routed = route_simulator(
        first.simulator().clone(),
        problem.index_theta[0].clone(),
    );
    CalibrationProblem::builder(
        design,
        Observations::Vector(mean),
        problem.theta_range.clone(),
        routed,
    )
    .discrepancy(discrepancy)
    .kernel(first.kernel().clone())
    .build()
}

/// Posterior-averaged predictions at new inputs.
pub struct MsPrediction {
    /// Estimated reality: averaged computer model plus the shared
    /// discrepancy (plus the per-source correlated term without bias mode,
    /// where that term is the model discrepancy).
    pub reality: DVector<f64>,
    pub math_model: DVector<f64>,
    pub shared_discrepancy: DVector<f64>,
    /// Per-source correlated-term estimates (measurement bias in bias mode,
    /// source discrepancy otherwise).
    pub biases: Vec<DVector<f64>>,
    pub n_draws_used: usize,
}

/// Predict by averaging conditional means over the retained draws: the
/// computer model at each theta draw, the shared discrepancy kriged from
/// its drawn values, and each source's correlated term kriged from that
/// source's residuals.
pub fn ms_predict(
    problem: &MultiSourceProblem,
    posterior: &MsPosterior,
    testing_input: &DMatrix<f64>,
) -> Result<MsPrediction> {
    let k = problem.k();
    let m = testing_input.nrows();
    let n_draws = posterior.n_draws();
    if n_draws == 0 {
        return Err(CalibError::invalid("posterior holds no draws"));
    }
    if posterior.k != k || posterior.p_theta != problem.p_theta() {
        return Err(CalibError::invalid("posterior does not match the problem"));
    }
    let shared_gp = posterior.measurement_bias && posterior.delta.ncols() > 0;
    let shared_kernel = if shared_gp { Some(problem.shared_kernel_spec()?) } else { None };
    let shared_design = problem.shared_design.clone();

    let mut sum_reality = DVector::<f64>::zeros(m);
    let mut sum_model = DVector::<f64>::zeros(m);
    let mut sum_shared = DVector::<f64>::zeros(m);
    let mut sum_bias = vec![DVector::<f64>::zeros(m); k];

    for row in 0..n_draws {
        let theta: Vec<f64> = (0..posterior.p_theta).map(|j| posterior.theta[(row, j)]).collect();

        // averaged computer model over sources at the testing inputs
        let mut f_avg = DVector::<f64>::zeros(m);
        let mut per_source_bias = Vec::with_capacity(k);
        let mut bias_into_reality = DVector::<f64>::zeros(m);
        for (l, source) in problem.sources.iter().enumerate() {
            let f_test = source.simulator().eval(testing_input, &theta)?;
            let f_design = source.simulator().eval(source.design(), &theta)?;
            f_avg += &f_test;

            let gp = source.discrepancy() != DiscrepancyType::NoDiscrepancy;
            let mut bias_t = DVector::<f64>::zeros(m);
            if gp {
                let log_beta: Vec<f64> = (0..posterior.source_log_beta[l].ncols())
                    .map(|j| posterior.source_log_beta[l][(row, j)])
                    .collect();
                let gamma = RangeParams::from_log_inverse_ranges(&log_beta)?;
                let eta = posterior.source_log_eta[l][row].exp();
                let parts = build_cov(source, source.discrepancy(), Some(&gamma), Some(eta), None)?;
                let mut resid = &source.stats().means - &f_design;
                let mu = posterior.source_mu[l][row];
                if mu != 0.0 {
                    resid.add_scalar_mut(-mu);
                }
                if shared_gp {
                    for i in 0..resid.len() {
                        resid[i] -= posterior.delta[(row, i)];
                    }
                }
                let w = parts.cov.solve_vec(&resid);
                let r_design = parts.r.as_ref().expect("GP covariance keeps base correlation");
                for t in 0..m {
                    let x: Vec<f64> = testing_input.row(t).iter().cloned().collect();
                    let r = cross_corr(source.design(), &x, source.kernel(), &gamma)?;
                    let rz = match &parts.scaled {
                        Some(sc) => sc.cross_vec(r_design, &r),
                        None => r,
                    };
                    bias_t[t] = rz.dot(&w) / eta;
                }
            }
            if !posterior.measurement_bias {
                bias_into_reality += &bias_t;
            }
            per_source_bias.push(bias_t);
        }
        f_avg /= k as f64;
        if !posterior.measurement_bias {
            bias_into_reality /= k as f64;
        }

        // shared discrepancy kriging from the drawn vector
        let mut shared_t = DVector::<f64>::zeros(m);
        if shared_gp {
            let design = shared_design.as_ref().expect("bias mode has a shared design");
            let kernel = shared_kernel.as_ref().expect("shared GP keeps a kernel");
            let log_beta: Vec<f64> = (0..posterior.shared_log_beta.ncols())
                .map(|j| posterior.shared_log_beta[(row, j)])
                .collect();
            let gamma = RangeParams::from_log_inverse_ranges(&log_beta)?;
            let lengths: Vec<f64> = (0..design.ncols())
                .map(|j| {
                    let col = design.column(j);
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for v in col.iter() {
                        lo = lo.min(*v);
                        hi = hi.max(*v);
                    }
                    if hi > lo {
                        hi - lo
                    } else {
                        1.0
                    }
                })
                .collect();
            let eta_eff = {
                let mean_s0: f64 =
                    (0..k).map(|l| posterior.source_sigma0_sq[l][row]).sum::<f64>() / k as f64;
                mean_s0 / posterior.sigma_delta_sq[row]
            };
            let (chol, _, scaled) = build_shared(
                design,
                kernel,
                &log_beta,
                problem.shared_discrepancy,
                eta_eff,
                &lengths,
            )?;
            let delta_row = DVector::from_fn(posterior.delta.ncols(), |i, _| posterior.delta[(row, i)]);
            let kw = chol.solve(&delta_row);
            let r_base = corr_matrix_raw(design, kernel, &gamma)?;
            for t in 0..m {
                let x: Vec<f64> = testing_input.row(t).iter().cloned().collect();
                let r = cross_corr(design, &x, kernel, &gamma)?;
                let rz = match &scaled {
                    Some(sc) => sc.cross_vec(&r_base, &r),
                    None => r,
                };
                shared_t[t] = rz.dot(&kw);
            }
        }

        sum_model += &f_avg;
        sum_shared += &shared_t;
        sum_reality += &f_avg;
        sum_reality += &shared_t;
        sum_reality += &bias_into_reality;
        for l in 0..k {
            sum_bias[l] += &per_source_bias[l];
        }
    }

    let scale = 1.0 / n_draws as f64;
    Ok(MsPrediction {
        reality: sum_reality * scale,
        math_model: sum_model * scale,
        shared_discrepancy: sum_shared * scale,
        biases: sum_bias.into_iter().map(|b| b * scale).collect(),
        n_draws_used: n_draws,
    })
}
