//! Posterior sampling by Metropolis within Gibbs.
//!
//! One iteration updates four blocks of the full conditional decomposition:
//!
//! 1. `theta` by a random walk on the original scale, rejecting proposals
//!    outside the parameter range before evaluating the simulator;
//! 2. `(log beta, log eta)` jointly by a Gaussian random walk against
//!    `-1/2 log|C| - quad/(2 sigma0^2) + log pi_JR + log Jacobian`, where
//!    `C` is the marginal residual correlation (GP discrepancies only);
//! 3. `sigma0^{-2}` exactly from its Gamma full conditional;
//! 4. trend coefficients exactly from their Gaussian full conditional.
//!
//! Draw order is fixed, so a seed pins the whole chain bit for bit.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{CalibError, Result};
use crate::inference::prior::JrPrior;
use crate::kernels::{chol_with_jitter, RangeParams};
use crate::model::{build_cov, CovParts, CalibrationProblem, DiscrepancyType};

/// Settings for [`run_mcmc`].
#[derive(Debug, Clone)]
pub struct McmcConfig {
    /// Total iterations, including burn in.
    pub n_samples: usize,
    /// Iterations discarded from the front of the chain.
    pub burn_in: usize,
    /// Keep every `thinning`-th post burn-in iteration.
    pub thinning: usize,
    /// Random walk scales. `None` uses 0.05 of each range width for `theta`
    /// and 0.25 for each of `log beta` and `log eta`. A vector of length
    /// `p_theta` overrides the `theta` fractions; length `p_theta + p_x + 1`
    /// additionally overrides the kernel scales (absolute, log scale).
    pub sd_proposal: Option<Vec<f64>>,
    /// Starting point for `theta`; the range midpoint if absent.
    pub initial_theta: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_samples: 10_000,
            burn_in: 2_000,
            thinning: 1,
            sd_proposal: None,
            initial_theta: None,
            seed: 42,
        }
    }
}

/// Retained draws in a flat matrix, one column per quantity.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub discrepancy: DiscrepancyType,
    pub p_theta: usize,
    pub p_x: usize,
    pub q_trend: usize,
    /// One retained draw per row; columns follow [`PosteriorSamples::column_names`].
    pub draws: DMatrix<f64>,
    pub accept_theta: u64,
    pub accept_kernel: u64,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Largest diagonal jitter any covariance factorization needed.
    pub max_jitter: f64,
}

fn has_kernel_block(d: DiscrepancyType) -> bool {
    d != DiscrepancyType::NoDiscrepancy
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn column_names(&self) -> Vec<String> {
        column_layout(self.discrepancy, self.p_theta, self.p_x, self.q_trend)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names().iter().position(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Option<DVector<f64>> {
        self.column_index(name).map(|j| self.draws.column(j).into_owned())
    }

    pub fn theta_at(&self, row: usize) -> Vec<f64> {
        (0..self.p_theta).map(|j| self.draws[(row, j)]).collect()
    }

    /// Kernel parameters of one retained draw, `None` without a GP
    /// discrepancy.
    pub fn kernel_at(&self, row: usize) -> Option<(RangeParams, f64)> {
        if !has_kernel_block(self.discrepancy) {
            return None;
        }
        let base = self.p_theta;
        let log_beta: Vec<f64> = (0..self.p_x).map(|l| self.draws[(row, base + l)]).collect();
        let eta = self.draws[(row, base + self.p_x)].exp();
        Some((
            RangeParams::from_log_inverse_ranges(&log_beta).expect("stored draw is finite"),
            eta,
        ))
    }

    pub fn sigma0_sq_at(&self, row: usize) -> f64 {
        let base = self.p_theta + if has_kernel_block(self.discrepancy) { self.p_x + 1 } else { 0 };
        self.draws[(row, base)]
    }

    pub fn trend_at(&self, row: usize) -> DVector<f64> {
        let base = self.p_theta
            + if has_kernel_block(self.discrepancy) { self.p_x + 1 } else { 0 }
            + 1;
        DVector::from_fn(self.q_trend, |j, _| self.draws[(row, base + j)])
    }

    pub fn lambda_z_at(&self, row: usize) -> Option<f64> {
        if self.discrepancy != DiscrepancyType::Sgasp {
            return None;
        }
        Some(self.draws[(row, self.draws.ncols() - 1)])
    }

    pub fn posterior_mean_theta(&self) -> Vec<f64> {
        (0..self.p_theta).map(|j| self.draws.column(j).mean()).collect()
    }

    /// Empirical quantile of one chain column.
    pub fn column_quantile(&self, name: &str, p: f64) -> Option<f64> {
        let col = self.column(name)?;
        Some(crate::util::quantile(col.as_slice(), p))
    }

    pub fn column_median(&self, name: &str) -> Option<f64> {
        let col = self.column(name)?;
        Some(crate::util::median(col.as_slice()))
    }

    pub fn acceptance_rate_theta(&self) -> f64 {
        self.accept_theta as f64 / self.n_iterations.max(1) as f64
    }

    pub fn acceptance_rate_kernel(&self) -> Option<f64> {
        if has_kernel_block(self.discrepancy) {
            Some(self.accept_kernel as f64 / self.n_iterations.max(1) as f64)
        } else {
            None
        }
    }

    /// Write the retained draws as CSV with a header row. Values print in
    /// shortest round-trip form, so reading back is exact.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(self.column_names())
            .map_err(|e| CalibError::Serialization(e.to_string()))?;
        for i in 0..self.draws.nrows() {
            let row: Vec<f64> = self.draws.row(i).iter().cloned().collect();
            wtr.serialize(row).map_err(|e| CalibError::Serialization(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Read draws written by [`PosteriorSamples::write_csv`]. The layout is
    /// recovered from the header; acceptance counters are not stored in the
    /// file and read back as zero.
    pub fn read_csv<R: Read>(r: R) -> Result<PosteriorSamples> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| CalibError::Serialization(e.to_string()))?
            .clone();
        let names: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        let p_theta = names.iter().filter(|n| n.starts_with("theta_") && !n.starts_with("theta_m_")).count();
        let p_x = names.iter().filter(|n| n.starts_with("log_beta_")).count();
        let q_trend = names.iter().filter(|n| n.starts_with("theta_m_")).count();
        let discrepancy = if names.iter().any(|n| n == "lambda_z") {
            DiscrepancyType::Sgasp
        } else if names.iter().any(|n| n == "log_eta") {
            DiscrepancyType::Gasp
        } else {
            DiscrepancyType::NoDiscrepancy
        };
        let expected = column_layout(discrepancy, p_theta, p_x, q_trend);
        if names != expected {
            return Err(CalibError::Serialization(format!(
                "unrecognized sample columns: {names:?}"
            )));
        }
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| CalibError::Serialization(e.to_string()))?;
            if rec.len() != names.len() {
                return Err(CalibError::Serialization("ragged sample rows".into()));
            }
            let mut row = Vec::with_capacity(rec.len());
            for field in rec.iter() {
                row.push(field.trim().parse::<f64>().map_err(|e| {
                    CalibError::Serialization(format!("bad number {field:?}: {e}"))
                })?);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CalibError::Serialization("sample file holds no draws".into()));
        }
        let draws = DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]);
        Ok(PosteriorSamples {
            discrepancy,
            p_theta,
            p_x,
            q_trend,
            draws,
            accept_theta: 0,
            accept_kernel: 0,
            n_iterations: rows.len(),
            burn_in: 0,
            thinning: 1,
            max_jitter: 0.0,
        })
    }
}

fn column_layout(
    discrepancy: DiscrepancyType,
    p_theta: usize,
    p_x: usize,
    q_trend: usize,
) -> Vec<String> {
    let mut names = Vec::new();
    for j in 0..p_theta {
        names.push(format!("theta_{j}"));
    }
    if has_kernel_block(discrepancy) {
        for l in 0..p_x {
            names.push(format!("log_beta_{l}"));
        }
        names.push("log_eta".into());
    }
    names.push("sigma0_sq".into());
    for j in 0..q_trend {
        names.push(format!("theta_m_{j}"));
    }
    if discrepancy == DiscrepancyType::Sgasp {
        names.push("lambda_z".into());
    }
    names
}

/// Draw `sigma0^2` from its inverse Gamma full conditional with shape
/// `n_total / 2` and rate `quad_plus_sf / 2` on the precision.
pub fn gibbs_sigma0<R: Rng>(rng: &mut R, n_total: usize, quad_plus_sf: f64) -> f64 {
    let rate = (quad_plus_sf / 2.0).max(1e-300);
    let shape = n_total as f64 / 2.0;
    let precision = Gamma::new(shape, 1.0 / rate)
        .expect("positive Gamma parameters")
        .sample(rng);
    (1.0 / precision).clamp(1e-300, f64::MAX)
}

/// Draw trend coefficients from `N(mean_hat, sigma0^2 (H' C^{-1} H)^{-1})`
/// given the Cholesky factor of `H' C^{-1} H`.
pub fn gibbs_trend<R: Rng>(
    rng: &mut R,
    mean_hat: &DVector<f64>,
    hth_chol: &Cholesky<f64, Dyn>,
    sigma0: f64,
) -> DVector<f64> {
    let q = mean_hat.len();
    let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
    // cov = sigma0^2 (L L')^{-1}, so x = mean + sigma0 L^{-T} z
    let l = hth_chol.l();
    let x = l
        .tr_solve_lower_triangular(&z)
        .expect("Cholesky factor is nonsingular");
    mean_hat + x * sigma0
}

struct TrendCache {
    cinv_h: DMatrix<f64>,
    hth_chol: Cholesky<f64, Dyn>,
}

fn trend_cache(parts: &CovParts, h: &DMatrix<f64>) -> Result<TrendCache> {
    let cinv_h = parts.cov.solve_mat(h);
    let hth = h.transpose() * &cinv_h;
    let (hth_chol, _) = chol_with_jitter(&hth, "trend precision")?;
    Ok(TrendCache { cinv_h, hth_chol })
}

fn proposal_sds(problem: &CalibrationProblem, config: &McmcConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let p_theta = problem.p_theta();
    let p_x = problem.p_x();
    let widths = problem.theta_widths();
    let (theta_frac, kernel_sd): (Vec<f64>, Vec<f64>) = match &config.sd_proposal {
        None => (vec![0.05; p_theta], vec![0.25; p_x + 1]),
        Some(v) if v.len() == p_theta => (v.clone(), vec![0.25; p_x + 1]),
        Some(v) if v.len() == p_theta + p_x + 1 => {
            (v[..p_theta].to_vec(), v[p_theta..].to_vec())
        }
        Some(v) => {
            return Err(CalibError::invalid(format!(
                "sd_proposal must have length {p_theta} or {}, got {}",
                p_theta + p_x + 1,
                v.len()
            )))
        }
    };
    if theta_frac.iter().chain(kernel_sd.iter()).any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(CalibError::invalid("proposal scales must be finite and positive"));
    }
    let sd_theta: Vec<f64> = theta_frac.iter().zip(&widths).map(|(f, w)| f * w).collect();
    Ok((sd_theta, kernel_sd))
}

/// Run the Metropolis within Gibbs sampler on a calibration problem.
pub fn run_mcmc(problem: &CalibrationProblem, config: &McmcConfig) -> Result<PosteriorSamples> {
    let n = problem.n();
    let p_theta = problem.p_theta();
    let p_x = problem.p_x();
    let q = problem.q_trend();
    let discrepancy = problem.discrepancy();
    let kernel_block = has_kernel_block(discrepancy);
    let stats = problem.stats();
    let n_total = stats.n_total;

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
            if t.len() != p_theta {
                return Err(CalibError::dim(format!(
                    "initial_theta has {} entries, expected {p_theta}",
                    t.len()
                )));
            }
            if !problem.theta_in_range(t) {
                return Err(CalibError::invalid("initial_theta is outside the parameter range"));
            }
            t.clone()
        }
        None => problem.theta_midpoint(),
    };
    let (sd_theta, sd_kernel) = proposal_sds(problem, config)?;

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let prior = JrPrior::default_for(n, problem.domain_lengths())?;

    // kernel state, fixed at dummy values when there is no GP discrepancy
    let mut log_beta: Vec<f64> = problem
        .domain_lengths()
        .iter()
        .map(|len| -(len / 2.0).ln())
        .collect();
    let mut log_eta: f64 = 0.0;
    let gamma0 = RangeParams::from_log_inverse_ranges(&log_beta)?;
    let mut parts = build_cov(
        problem,
        discrepancy,
        if kernel_block { Some(&gamma0) } else { None },
        if kernel_block { Some(log_eta.exp()) } else { None },
        None,
    )?;
    let mut max_jitter = parts.cov.jitter();

    let h = problem.trend().cloned();
    let mut trend = trendless_or(&h, &parts)?;
    let mut theta_m = DVector::<f64>::zeros(q);

    let f0 = problem.simulator().eval(problem.design(), &theta)?;
    // y_base excludes the trend, y_star includes it
    let mut y_base = &stats.means - &f0;
    if let (Some(h), Some(tr)) = (&h, trend.as_ref()) {
        let rhs = h.transpose() * parts.cov.solve_vec(&y_base);
        theta_m = tr.hth_chol.solve(&rhs);
    }
    let mut y_star = residual_with_trend(&y_base, &h, &theta_m);
    let mut quad = parts.cov.quad(&y_star);
    let mut sigma0_sq = {
        let v = (quad + stats.s_f_sq) / n_total as f64;
        if v.is_finite() && v > 0.0 {
            v
        } else {
            1.0
        }
    };

    let kernel_target = |parts: &CovParts, lb: &[f64], le: f64, quad: f64, s0: f64| -> f64 {
        let beta: Vec<f64> = lb.iter().map(|v| v.exp()).collect();
        -0.5 * parts.cov.log_det() - quad / (2.0 * s0)
            + prior.log_density(&beta, le.exp())
            + lb.iter().sum::<f64>()
            + le
    };

    let n_cols = column_layout(discrepancy, p_theta, p_x, q).len();
    let mut draws = DMatrix::<f64>::zeros(n_keep, n_cols);
    let mut kept = 0usize;
    let mut accept_theta = 0u64;
    let mut accept_kernel = 0u64;

    for iter in 1..=config.n_samples {
        // block 1: theta random walk
        let prop: Vec<f64> = theta
            .iter()
            .zip(&sd_theta)
            .map(|(t, s)| t + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if problem.theta_in_range(&prop) {
            if let Ok(f_prop) = problem.simulator().eval(problem.design(), &prop) {
                let y_base_prop = &stats.means - &f_prop;
                let y_star_prop = residual_with_trend(&y_base_prop, &h, &theta_m);
                let quad_prop = parts.cov.quad(&y_star_prop);
                let log_alpha = (quad - quad_prop) / (2.0 * sigma0_sq);
                if rng.random::<f64>().ln() < log_alpha {
                    theta = prop;
                    y_base = y_base_prop;
                    y_star = y_star_prop;
                    quad = quad_prop;
                    accept_theta += 1;
                }
            }
        }

        // block 2: kernel parameters on the log scale
        if kernel_block {
            let lb_prop: Vec<f64> = log_beta
                .iter()
                .zip(&sd_kernel[..p_x])
                .map(|(b, s)| b + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let le_prop = log_eta + sd_kernel[p_x] * rng.sample::<f64, _>(StandardNormal);
            let in_bounds =
                lb_prop.iter().all(|v| v.abs() <= 40.0) && le_prop.abs() <= 40.0;
            if in_bounds {
                if let Ok(gamma_prop) = RangeParams::from_log_inverse_ranges(&lb_prop) {
                    if let Ok(parts_prop) =
                        build_cov(problem, discrepancy, Some(&gamma_prop), Some(le_prop.exp()), None)
                    {
                        let quad_prop = parts_prop.cov.quad(&y_star);
                        let cur = kernel_target(&parts, &log_beta, log_eta, quad, sigma0_sq);
                        let new = kernel_target(&parts_prop, &lb_prop, le_prop, quad_prop, sigma0_sq);
                        if rng.random::<f64>().ln() < new - cur {
                            parts = parts_prop;
                            log_beta = lb_prop;
                            log_eta = le_prop;
                            quad = quad_prop;
                            max_jitter = max_jitter.max(parts.cov.jitter());
                            trend = trendless_or(&h, &parts)?;
                            accept_kernel += 1;
                        }
                    }
                }
            }
        }

        // block 3: noise variance
        sigma0_sq = gibbs_sigma0(&mut rng, n_total, quad + stats.s_f_sq);

        // block 4: trend coefficients
        if let (Some(hm), Some(tr)) = (&h, trend.as_ref()) {
            let rhs = tr.cinv_h.transpose() * &y_base;
            let mean_hat = tr.hth_chol.solve(&rhs);
            theta_m = gibbs_trend(&mut rng, &mean_hat, &tr.hth_chol, sigma0_sq.sqrt());
            y_star = &y_base - hm * &theta_m;
            quad = parts.cov.quad(&y_star);
        }

        if iter > config.burn_in && (iter - config.burn_in) % config.thinning == 0 && kept < n_keep
        {
            let mut col = 0;
            for t in &theta {
                draws[(kept, col)] = *t;
                col += 1;
            }
            if kernel_block {
                for b in &log_beta {
                    draws[(kept, col)] = *b;
                    col += 1;
                }
                draws[(kept, col)] = log_eta;
                col += 1;
            }
            draws[(kept, col)] = sigma0_sq;
            col += 1;
            for j in 0..q {
                draws[(kept, col)] = theta_m[j];
                col += 1;
            }
            if discrepancy == DiscrepancyType::Sgasp {
                draws[(kept, col)] = parts.lambda_z.unwrap_or(f64::NAN);
            }
            kept += 1;
        }
    }

    Ok(PosteriorSamples {
        discrepancy,
        p_theta,
        p_x,
        q_trend: q,
        draws,
        accept_theta,
        accept_kernel,
        n_iterations: config.n_samples,
        burn_in: config.burn_in,
        thinning: config.thinning,
        max_jitter,
    })
}

fn residual_with_trend(
    y_base: &DVector<f64>,
    h: &Option<DMatrix<f64>>,
    theta_m: &DVector<f64>,
) -> DVector<f64> {
    match h {
        Some(hm) if theta_m.len() > 0 => y_base - hm * theta_m,
        _ => y_base.clone(),
    }
}

fn trendless_or(h: &Option<DMatrix<f64>>, parts: &CovParts) -> Result<Option<TrendCache>> {
    match h {
        Some(hm) => Ok(Some(trend_cache(parts, hm)?)),
        None => Ok(None),
    }
}
