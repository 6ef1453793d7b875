//! GP emulators for expensive simulators.
//!
//! Scalar emulation fits an ordinary GP with constant mean to one output;
//! parallel partial emulation (multi-output) shares one set of kernel
//! parameters across all output coordinates while keeping separate means and
//! variances per coordinate, which keeps the cost at one `D x D`
//! factorization regardless of how many outputs the simulator has. Both are
//! the same computation with k = 1 or k > 1 output columns.
//!
//! Kernel parameters maximize the marginal posterior with mean and variances
//! integrated out under `pi(mu, sigma^2) \propto 1/sigma^2`, a jointly
//! robust prior on (beta, eta) and the Jacobian of the log transform:
//!
//! ```text
//! l(log beta, log eta) = -k/2 [log|Rt| + log(1' Rt^{-1} 1)]
//!                        - (D-1)/2 sum_j log S2_j
//!                        + log pi_JR(beta, eta) + sum log beta + log eta
//! ```
//!
//! with `Rt = R + eta I` and `S2_j` the GLS residual sum of squares of
//! output column j.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};
use crate::inference::lbfgs;
use crate::inference::JrPrior;
use crate::kernels::{
    chol_log_det, chol_with_jitter, corr_matrix_raw, cross_corr, KernelFamily, KernelSpec,
    RangeParams,
};
use crate::model::SimulatorBinding;

const FORMAT_VERSION: u32 = 1;

/// Training data for an emulator.
pub struct EmulatorData {
    /// Simulation inputs, one run per row (D x p).
    pub inputs: DMatrix<f64>,
    /// Simulation outputs, one run per row (D x k); k = 1 for scalar output.
    pub outputs: DMatrix<f64>,
    /// Optional physical locations of the k output coordinates, used to match
    /// calibration design rows to output coordinates (k x p_loc).
    pub coords: Option<DMatrix<f64>>,
    /// Estimate a nugget. Without it the emulator interpolates the runs.
    pub with_nugget: bool,
}

/// Mean, variance and hull flag of an emulator prediction.
#[derive(Debug, Clone)]
pub struct EmuPrediction {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    /// The query point lies outside the axis-aligned hull of the training
    /// inputs; the prediction is an extrapolation.
    pub extrapolation: bool,
}

/// A fitted GP emulator (scalar or parallel partial).
pub struct FittedEmulator {
    kernel: KernelSpec,
    gamma: RangeParams,
    eta: f64,
    with_nugget: bool,
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    coords: Option<DMatrix<f64>>,
    mu: DVector<f64>,
    sigma_sq: DVector<f64>,
    // derived quantities, rebuilt deterministically on load
    chol: Cholesky<f64, Dyn>,
    weights: DMatrix<f64>,
    rinv_one: DVector<f64>,
    one_rinv_one: f64,
    jitter: f64,
    input_lo: Vec<f64>,
    input_hi: Vec<f64>,
    /// Coordinate rows ordered by first column, for lookup by binary search.
    coord_order: Vec<usize>,
}

struct ObjectiveCtx<'a> {
    outputs: &'a DMatrix<f64>,
    kernel: &'a KernelSpec,
    prior: &'a JrPrior,
    with_nugget: bool,
    /// Pairwise coordinate distances `|x_il - x_jl|`, one matrix per input
    /// dimension, computed once per fit.
    dists: Vec<DMatrix<f64>>,
    /// Large work matrices reused across objective evaluations.
    work: std::cell::RefCell<ObjectiveWork>,
}

struct ObjectiveWork {
    /// Per-dimension correlation factors of the current point.
    factors: Vec<DMatrix<f64>>,
    resid: DMatrix<f64>,
    w: DMatrix<f64>,
    ws: DMatrix<f64>,
}

impl<'a> ObjectiveCtx<'a> {
    fn new(
        inputs: &DMatrix<f64>,
        outputs: &'a DMatrix<f64>,
        kernel: &'a KernelSpec,
        prior: &'a JrPrior,
        with_nugget: bool,
    ) -> Self {
        let d = inputs.nrows();
        let p = inputs.ncols();
        let k = outputs.ncols();
        let dists = (0..p)
            .map(|l| DMatrix::from_fn(d, d, |i, j| (inputs[(i, l)] - inputs[(j, l)]).abs()))
            .collect();
        let work = ObjectiveWork {
            factors: vec![DMatrix::zeros(d, d); p],
            resid: DMatrix::zeros(d, k),
            w: DMatrix::zeros(d, k),
            ws: DMatrix::zeros(d, k),
        };
        ObjectiveCtx { outputs, kernel, prior, with_nugget, dists, work: work.into() }
    }
}

/// Negative log posterior and gradient in z = [log beta.., (log eta)].
fn objective(ctx: &ObjectiveCtx, z: &[f64]) -> Option<(f64, Vec<f64>)> {
    let p = ctx.kernel.dim();
    let d = ctx.outputs.nrows();
    let k = ctx.outputs.ncols();
    if z.iter().any(|v| !v.is_finite() || v.abs() > 40.0) {
        return None;
    }
    let log_beta = &z[..p];
    let eta = if ctx.with_nugget { z[p].exp() } else { 0.0 };
    let beta: Vec<f64> = log_beta.iter().map(|b| b.exp()).collect();
    let gamma = RangeParams::from_log_inverse_ranges(log_beta).ok()?;
    let mut work = ctx.work.borrow_mut();
    let work = &mut *work;

    // per-dimension factors once, reused by the value and every derivative
    let mut rt = DMatrix::<f64>::identity(d, d);
    for l in 0..p {
        let fam = ctx.kernel.family(l);
        let g = gamma.gamma()[l];
        let fl = &mut work.factors[l];
        for i in 0..d {
            for j in 0..i {
                let v = fam.correlation(ctx.dists[l][(i, j)], g);
                fl[(i, j)] = v;
                fl[(j, i)] = v;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            let mut v = 1.0;
            for fl in work.factors.iter() {
                v *= fl[(i, j)];
            }
            rt[(i, j)] = v;
            rt[(j, i)] = v;
        }
        rt[(i, i)] += eta;
    }
    let (chol, _jitter) = chol_with_jitter(&rt, "emulator covariance").ok()?;
    let log_det = chol_log_det(&chol);

    let ones = DVector::from_element(d, 1.0);
    let ri1 = chol.solve(&ones);
    let s11 = ri1.sum();
    if !(s11 > 0.0) {
        return None;
    }
    let mu = ctx.outputs.transpose() * &ri1 / s11;
    for j in 0..k {
        for i in 0..d {
            work.resid[(i, j)] = ctx.outputs[(i, j)] - mu[j];
        }
    }
    work.w.copy_from(&work.resid);
    chol.solve_mut(&mut work.w);
    let mut sum_log_s2 = 0.0;
    let mut s2 = vec![0.0; k];
    for j in 0..k {
        let v = work.resid.column(j).dot(&work.w.column(j));
        if !(v > 0.0) {
            return None;
        }
        s2[j] = v;
        sum_log_s2 += v.ln();
    }

    let kf = k as f64;
    let df = (d - 1) as f64;
    let jacobian: f64 = log_beta.iter().sum::<f64>() + if ctx.with_nugget { z[p] } else { 0.0 };
    let loglik = -0.5 * kf * (log_det + s11.ln()) - 0.5 * df * sum_log_s2
        + ctx.prior.log_density(&beta, eta)
        + jacobian;
    if !loglik.is_finite() {
        return None;
    }

    // gradient: dl/dtau = <Rt_dot, T> with
    // T = -k/2 Rt^{-1} + k/2 (ri1 ri1')/s11 + (D-1)/2 W diag(1/S2_j) W'
    let inv = chol.inverse();
    let mut t_mat = inv * (-0.5 * kf);
    work.ws.copy_from(&work.w);
    for j in 0..k {
        let scale = 1.0 / s2[j];
        for i in 0..d {
            work.ws[(i, j)] *= scale;
        }
    }
    t_mat.gemm(0.5 * df, &work.w, &work.ws.transpose(), 1.0);
    t_mat.ger(0.5 * kf / s11, &ri1, &ri1, 1.0);

    // prior/jacobian pieces share t = sum C_l beta_l + eta
    let t_sum: f64 =
        beta.iter().zip(&ctx.prior.c).map(|(b, c)| b * c).sum::<f64>() + eta;
    let prior_slope = ctx.prior.a / t_sum - ctx.prior.b;

    // <Rt_dot, T> contracted in place: the dim-l derivative entry is the
    // product of the other factors times the kernel derivative
    let mut grad = Vec::with_capacity(z.len());
    for l in 0..p {
        let fam = ctx.kernel.family(l);
        let g = gamma.gamma()[l];
        let mut d_gamma = 0.0;
        for i in 0..d {
            for j in 0..i {
                let mut rest = 1.0;
                for (m, fm) in work.factors.iter().enumerate() {
                    if m != l {
                        rest *= fm[(i, j)];
                    }
                }
                let v = rest * fam.d_correlation_d_gamma(ctx.dists[l][(i, j)], g);
                d_gamma += 2.0 * v * t_mat[(i, j)];
            }
        }
        let d_log_beta = -gamma.gamma()[l] * d_gamma + prior_slope * ctx.prior.c[l] * beta[l] + 1.0;
        grad.push(d_log_beta);
    }
    if ctx.with_nugget {
        let d_eta = t_mat.trace();
        grad.push(eta * d_eta + prior_slope * eta + 1.0);
    }
    // minimize the negative
    Some((-loglik, grad.iter().map(|g| -g).collect()))
}

fn validate_data(data: &EmulatorData) -> Result<()> {
    let d = data.inputs.nrows();
    let p = data.inputs.ncols();
    if d < 3 || p == 0 {
        return Err(CalibError::invalid(
            "emulator needs at least 3 runs and one input dimension",
        ));
    }
    if data.outputs.nrows() != d {
        return Err(CalibError::dim(format!(
            "{} output rows for {d} input rows",
            data.outputs.nrows()
        )));
    }
    if data.outputs.ncols() == 0 {
        return Err(CalibError::invalid("emulator outputs must have at least one column"));
    }
    if data.inputs.iter().any(|v| !v.is_finite()) || data.outputs.iter().any(|v| !v.is_finite()) {
        return Err(CalibError::NonFinite("emulator training data".into()));
    }
    for j in 0..data.outputs.ncols() {
        let col = data.outputs.column(j);
        let mean = col.mean();
        if col.iter().all(|v| (v - mean).abs() < 1e-14 * (1.0 + mean.abs())) {
            return Err(CalibError::invalid(format!(
                "output coordinate {j} is constant across runs; drop it before fitting"
            )));
        }
    }
    if let Some(c) = &data.coords {
        if c.nrows() != data.outputs.ncols() {
            return Err(CalibError::dim(format!(
                "{} coordinate rows for {} output columns",
                c.nrows(),
                data.outputs.ncols()
            )));
        }
    }
    Ok(())
}

fn fit_impl(data: &EmulatorData, kernel: Option<KernelSpec>) -> Result<FittedEmulator> {
    validate_data(data)?;
    let d = data.inputs.nrows();
    let p = data.inputs.ncols();
    let kernel = match kernel {
        Some(k) if k.dim() == p => k,
        Some(k) => {
            return Err(CalibError::dim(format!(
                "kernel covers {} dimensions, inputs have {p}",
                k.dim()
            )))
        }
        None => KernelSpec::uniform(KernelFamily::Matern52, p)?,
    };
    let lengths: Vec<f64> = (0..p)
        .map(|l| {
            let col = data.inputs.column(l);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for v in col.iter() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
            let len = hi - lo;
            if len.is_finite() && len > 0.0 {
                len
            } else {
                1.0
            }
        })
        .collect();
    let prior = JrPrior::default_for(d, &lengths)?;
    let ctx = ObjectiveCtx::new(&data.inputs, &data.outputs, &kernel, &prior, data.with_nugget);

    // deterministic restarts around the typical design spacing
    let spacing_scale = (d as f64).powf(-1.0 / p as f64);
    let gamma_mults = [3.0, 0.5, 20.0];
    let eta_starts: [f64; 3] = [1e-3, 1e-2, 1e-4];
    let mut best: Option<lbfgs::LbfgsOutcome> = None;
    let mut failures = Vec::new();
    for s in 0..gamma_mults.len() {
        let mut z: Vec<f64> = lengths
            .iter()
            .map(|len| -(gamma_mults[s] * spacing_scale * len).ln())
            .collect();
        if data.with_nugget {
            z.push(eta_starts[s].ln());
        }
        match lbfgs::minimize(|zz| objective(&ctx, zz), &z, 150) {
            Ok(out) => {
                if best.as_ref().map_or(true, |b| out.f < b.f) {
                    best = Some(out);
                }
            }
            Err(e) => failures.push(e),
        }
    }
    let best = best.ok_or_else(|| {
        CalibError::OptimizerFailure(format!(
            "all emulator starts failed: {}",
            failures.join("; ")
        ))
    })?;

    let log_beta = &best.x[..p];
    let gamma = RangeParams::from_log_inverse_ranges(log_beta)?;
    let eta = if data.with_nugget { best.x[p].exp() } else { 0.0 };
    FittedEmulator::assemble(
        kernel,
        gamma,
        eta,
        data.with_nugget,
        data.inputs.clone(),
        data.outputs.clone(),
        data.coords.clone(),
    )
}

/// Fit a scalar-output emulator (outputs must have exactly one column).
pub fn fit_scalar(data: &EmulatorData, kernel: Option<KernelSpec>) -> Result<FittedEmulator> {
    if data.outputs.ncols() != 1 {
        return Err(CalibError::invalid(format!(
            "scalar emulator expects one output column, got {}",
            data.outputs.ncols()
        )));
    }
    fit_impl(data, kernel)
}

/// Fit a parallel partial emulator over all output coordinates at once.
pub fn fit_ppgasp(data: &EmulatorData, kernel: Option<KernelSpec>) -> Result<FittedEmulator> {
    fit_impl(data, kernel)
}

/// Wrap a fitted emulator as a simulator binding for calibration. With a
/// multi-output emulator, design rows are matched to output coordinates via
/// the emulator's stored coordinates, or `loc_index` when given.
pub fn bind_emulator(
    emulator: Arc<FittedEmulator>,
    loc_index: Option<Vec<usize>>,
) -> SimulatorBinding {
    SimulatorBinding::from_emulator(emulator, loc_index)
}

#[derive(Serialize, Deserialize)]
struct EmulatorFile {
    format_version: u32,
    kind: String,
    kernel: KernelSpec,
    gamma: Vec<f64>,
    eta: f64,
    with_nugget: bool,
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    coords: Option<Vec<Vec<f64>>>,
    mu: Vec<f64>,
    sigma_sq: Vec<f64>,
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(CalibError::Serialization(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CalibError::Serialization(format!("{what}: ragged rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl FittedEmulator {
    fn assemble(
        kernel: KernelSpec,
        gamma: RangeParams,
        eta: f64,
        with_nugget: bool,
        inputs: DMatrix<f64>,
        outputs: DMatrix<f64>,
        coords: Option<DMatrix<f64>>,
    ) -> Result<FittedEmulator> {
        let d = inputs.nrows();
        let k = outputs.ncols();
        let mut rt = corr_matrix_raw(&inputs, &kernel, &gamma)?;
        for i in 0..d {
            rt[(i, i)] += eta;
        }
        let (chol, jitter) = chol_with_jitter(&rt, "emulator covariance")?;
        let ones = DVector::from_element(d, 1.0);
        let rinv_one = chol.solve(&ones);
        let one_rinv_one = rinv_one.sum();
        if !(one_rinv_one > 0.0) {
            return Err(CalibError::NonFinite("emulator mean precision".into()));
        }
        let mu = outputs.transpose() * &rinv_one / one_rinv_one;
        let mut resid = outputs.clone();
        for j in 0..k {
            for i in 0..d {
                resid[(i, j)] -= mu[j];
            }
        }
        let weights = chol.solve(&resid);
        let df = (d - 1) as f64;
        let sigma_sq = DVector::from_fn(k, |j, _| {
            (resid.column(j).dot(&weights.column(j)) / df).max(0.0)
        });
        let p = inputs.ncols();
        let mut input_lo = vec![f64::INFINITY; p];
        let mut input_hi = vec![f64::NEG_INFINITY; p];
        for i in 0..d {
            for l in 0..p {
                input_lo[l] = input_lo[l].min(inputs[(i, l)]);
                input_hi[l] = input_hi[l].max(inputs[(i, l)]);
            }
        }
        let coord_order = match &coords {
            Some(c) => {
                let mut order: Vec<usize> = (0..c.nrows()).collect();
                if c.ncols() > 0 {
                    order.sort_by(|&a, &b| c[(a, 0)].total_cmp(&c[(b, 0)]));
                }
                order
            }
            None => Vec::new(),
        };
        Ok(FittedEmulator {
            kernel,
            gamma,
            eta,
            with_nugget,
            inputs,
            outputs,
            coords,
            mu,
            sigma_sq,
            chol,
            weights,
            rinv_one,
            one_rinv_one,
            jitter,
            input_lo,
            input_hi,
            coord_order,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn n_runs(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn gamma(&self) -> &RangeParams {
        &self.gamma
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn mean_coefficients(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn variances(&self) -> &DVector<f64> {
        &self.sigma_sq
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn coords(&self) -> Option<&DMatrix<f64>> {
        self.coords.as_ref()
    }

    pub fn is_extrapolating(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .any(|(l, v)| *v < self.input_lo[l] || *v > self.input_hi[l])
    }

    /// Predictive mean and variance at one input point for every output
    /// coordinate.
    pub fn predict(&self, x: &[f64]) -> Result<EmuPrediction> {
        if x.len() != self.input_dim() {
            return Err(CalibError::dim(format!(
                "query point has {} coordinates, emulator inputs have {}",
                x.len(),
                self.input_dim()
            )));
        }
        let r = cross_corr(&self.inputs, x, &self.kernel, &self.gamma)?;
        let rr = self.chol.solve(&r);
        let mean = &self.mu + self.weights.transpose() * &r;
        let hterm = 1.0 - self.rinv_one.dot(&r);
        let common =
            (1.0 + self.eta - r.dot(&rr) + hterm * hterm / self.one_rinv_one).max(0.0);
        let variance = self.sigma_sq.map(|s| s * common);
        Ok(EmuPrediction { mean, variance, extrapolation: self.is_extrapolating(x) })
    }

    /// Predictive means only (hot path during calibration).
    pub fn predict_mean(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(CalibError::dim(format!(
                "query point has {} coordinates, emulator inputs have {}",
                x.len(),
                self.input_dim()
            )));
        }
        let r = cross_corr(&self.inputs, x, &self.kernel, &self.gamma)?;
        Ok(&self.mu + self.weights.transpose() * &r)
    }

    /// Leave-one-out residuals (observed minus LOO prediction) per run and
    /// output coordinate, from the closed form for fixed kernel parameters.
    pub fn loo_residuals(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        let d = self.n_runs();
        let k = self.output_dim();
        DMatrix::from_fn(d, k, |i, j| self.weights[(i, j)] / inv[(i, i)])
    }

    /// Simulator-style evaluation: outputs at every design row for
    /// parameters `theta`. Scalar emulators see `[x_row, theta]` as input;
    /// multi-output emulators see `theta` alone and rows are mapped to
    /// output coordinates.
    pub(crate) fn eval_as_simulator(
        &self,
        design: &DMatrix<f64>,
        theta: &[f64],
        loc_override: Option<&[usize]>,
    ) -> Result<DVector<f64>> {
        let n = design.nrows();
        if self.output_dim() == 1 {
            let p_in = self.input_dim();
            if design.ncols() + theta.len() != p_in {
                return Err(CalibError::dim(format!(
                    "scalar emulator expects {} inputs, got {} design columns + {} parameters",
                    p_in,
                    design.ncols(),
                    theta.len()
                )));
            }
            let mut x = vec![0.0; p_in];
            x[design.ncols()..].copy_from_slice(theta);
            let mut out = DVector::<f64>::zeros(n);
            for i in 0..n {
                for l in 0..design.ncols() {
                    x[l] = design[(i, l)];
                }
                let r = cross_corr(&self.inputs, &x, &self.kernel, &self.gamma)?;
                out[i] = self.mu[0] + self.weights.column(0).dot(&r);
            }
            return Ok(out);
        }
        if theta.len() != self.input_dim() {
            return Err(CalibError::dim(format!(
                "multi-output emulator expects {} parameters, got {}",
                self.input_dim(),
                theta.len()
            )));
        }
        let k = self.output_dim();
        if let Some(loc) = loc_override {
            if loc.len() == n {
                // only the requested output columns are evaluated, so short
                // calibration designs stay cheap against wide emulators
                let r = cross_corr(&self.inputs, theta, &self.kernel, &self.gamma)?;
                let mut out = DVector::<f64>::zeros(n);
                for (i, idx) in loc.iter().enumerate() {
                    if *idx >= k {
                        return Err(CalibError::invalid(format!(
                            "loc_index entry {idx} exceeds {k} output coordinates"
                        )));
                    }
                    out[i] = self.mu[*idx] + self.weights.column(*idx).dot(&r);
                }
                return Ok(out);
            }
        }
        if self.coords.is_some() {
            let means = self.predict_mean(theta)?;
            let mut out = DVector::<f64>::zeros(n);
            for i in 0..n {
                match self.match_coord(design, i) {
                    Some(c) => out[i] = means[c],
                    None => {
                        return Err(CalibError::Simulator(format!(
                            "design row {i} does not match any emulator output coordinate"
                        )))
                    }
                }
            }
            return Ok(out);
        }
        if n == k {
            return self.predict_mean(theta);
        }
        Err(CalibError::Simulator(
            "cannot map design rows to emulator output coordinates: provide loc_index or coords"
                .into(),
        ))
    }

    /// Smallest output index whose coordinates match design row `i` within
    /// 1e-8 relative, located by binary search over the presorted rows.
    fn match_coord(&self, design: &DMatrix<f64>, i: usize) -> Option<usize> {
        let coords = self.coords.as_ref()?;
        let cols = coords.ncols().min(design.ncols());
        let matches = |c: usize| {
            (0..cols).all(|l| {
                let (a, b) = (design[(i, l)], coords[(c, l)]);
                (a - b).abs() <= 1e-8 * (1.0 + b.abs())
            })
        };
        if cols == 0 {
            return (0..coords.nrows()).find(|&c| matches(c));
        }
        // candidate window on the first coordinate, slightly wider than the
        // per-entry tolerance, then exact row checks inside it
        let a0 = design[(i, 0)];
        let tol = 2e-8 * (1.0 + a0.abs());
        let start = self
            .coord_order
            .partition_point(|&c| coords[(c, 0)] < a0 - tol);
        let mut found: Option<usize> = None;
        for &c in &self.coord_order[start..] {
            if coords[(c, 0)] > a0 + tol {
                break;
            }
            if matches(c) && found.map_or(true, |f| c < f) {
                found = Some(c);
            }
        }
        found
    }

    pub fn save_json<W: Write>(&self, mut w: W) -> Result<()> {
        let file = EmulatorFile {
            format_version: FORMAT_VERSION,
            kind: if self.output_dim() == 1 { "scalar".into() } else { "ppgasp".into() },
            kernel: self.kernel.clone(),
            gamma: self.gamma.gamma().to_vec(),
            eta: self.eta,
            with_nugget: self.with_nugget,
            inputs: matrix_to_rows(&self.inputs),
            outputs: matrix_to_rows(&self.outputs),
            coords: self.coords.as_ref().map(matrix_to_rows),
            mu: self.mu.iter().cloned().collect(),
            sigma_sq: self.sigma_sq.iter().cloned().collect(),
        };
        let body = serde_json::to_string(&file)
            .map_err(|e| CalibError::Serialization(e.to_string()))?;
        w.write_all(body.as_bytes())?;
        Ok(())
    }

    pub fn load_json<R: Read>(mut r: R) -> Result<FittedEmulator> {
        let mut body = String::new();
        r.read_to_string(&mut body)?;
        let value: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| CalibError::Serialization(format!("invalid emulator file: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CalibError::Serialization("missing format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(CalibError::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version as u32,
            });
        }
        let file: EmulatorFile = serde_json::from_value(value)
            .map_err(|e| CalibError::Serialization(format!("invalid emulator file: {e}")))?;
        let inputs = rows_to_matrix(&file.inputs, "inputs")?;
        let outputs = rows_to_matrix(&file.outputs, "outputs")?;
        let coords = match &file.coords {
            Some(c) => Some(rows_to_matrix(c, "coords")?),
            None => None,
        };
        let em = FittedEmulator::assemble(
            file.kernel,
            RangeParams::new(file.gamma)?,
            file.eta,
            file.with_nugget,
            inputs,
            outputs,
            coords,
        )?;
        // stored mean/variance take precedence over the recomputed ones so a
        // round trip is exact even if numeric libraries change subtly
        let mut em = em;
        if file.mu.len() != em.output_dim() || file.sigma_sq.len() != em.output_dim() {
            return Err(CalibError::Serialization("mu/sigma_sq length mismatch".into()));
        }
        em.mu = DVector::from_vec(file.mu);
        em.sigma_sq = DVector::from_vec(file.sigma_sq);
        Ok(em)
    }
}
