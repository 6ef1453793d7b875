//! Problem container: field data, simulator binding, discrepancy choice.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::emulator::FittedEmulator;
use crate::error::{CalibError, Result};
use crate::kernels::{KernelFamily, KernelSpec};

/// How the gap between reality and the simulator is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscrepancyType {
    /// Observations are simulator plus trend plus independent noise.
    NoDiscrepancy,
    /// Gaussian stochastic process discrepancy.
    Gasp,
    /// Scaled GaSP discrepancy: the GaSP conditioned to favor a small
    /// random L2 norm, controlled by `lambda_z`.
    Sgasp,
}

/// Scale parameter of the S-GaSP shrinkage measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaZ {
    /// Recomputed from the current kernel parameters at every use.
    Auto,
    /// Held fixed at the given positive value.
    Fixed(f64),
}

/// Field observations. Replicated designs can be given as a matrix (same
/// number of replicates everywhere) or ragged per-row vectors.
#[derive(Debug, Clone)]
pub enum Observations {
    Vector(DVector<f64>),
    Replicates(DMatrix<f64>),
    Ragged(Vec<Vec<f64>>),
}

impl Observations {
    pub fn n(&self) -> usize {
        match self {
            Observations::Vector(v) => v.len(),
            Observations::Replicates(m) => m.nrows(),
            Observations::Ragged(r) => r.len(),
        }
    }
}

/// Sufficient statistics of (possibly replicated) observations: per-input
/// means, replicate counts, aggregated noise precisions `k_i w_i`, and the
/// within-replicate weighted sum of squares that enters the likelihood.
#[derive(Debug, Clone)]
pub struct ReplicateStats {
    pub means: DVector<f64>,
    pub counts: Vec<usize>,
    /// Precision multiplier of each aggregated observation: `k_i * w_i`.
    pub precisions: DVector<f64>,
    /// Sum over inputs of `w_i * sum_j (y_ij - mean_i)^2`.
    pub s_f_sq: f64,
    /// Total number of scalar observations, N = sum_i k_i.
    pub n_total: usize,
}

impl ReplicateStats {
    /// Diagonal of the aggregated noise correlation, `1 / (k_i w_i)`.
    pub fn lambda_diag(&self) -> DVector<f64> {
        self.precisions.map(|p| 1.0 / p)
    }
}

/// Collapse observations into sufficient statistics given per-input weights
/// (noise variance at input i is `sigma0^2 / w_i`).
pub fn replicate_stats(obs: &Observations, weights: &[f64]) -> Result<ReplicateStats> {
    let n = obs.n();
    if n == 0 {
        return Err(CalibError::invalid("observations are empty"));
    }
    if weights.len() != n {
        return Err(CalibError::dim(format!(
            "output weights length {} does not match {} observation rows",
            weights.len(),
            n
        )));
    }
    for (i, w) in weights.iter().enumerate() {
        if !(w.is_finite() && *w > 0.0) {
            return Err(CalibError::invalid(format!(
                "output weight {i} must be finite and positive, got {w}"
            )));
        }
    }
    let mut means = DVector::<f64>::zeros(n);
    let mut counts = vec![0usize; n];
    let mut s_f_sq = 0.0;
    let check = |row: &[f64], i: usize| -> Result<(f64, usize)> {
        if row.is_empty() {
            return Err(CalibError::invalid(format!("observation row {i} has no replicates")));
        }
        let mut sum = 0.0;
        for v in row {
            if !v.is_finite() {
                return Err(CalibError::NonFinite(format!("observation at row {i}")));
            }
            sum += v;
        }
        Ok((sum / row.len() as f64, row.len()))
    };
    match obs {
        Observations::Vector(y) => {
            for i in 0..n {
                let (m, k) = check(&[y[i]], i)?;
                means[i] = m;
                counts[i] = k;
            }
        }
        Observations::Replicates(y) => {
            for i in 0..n {
                let row: Vec<f64> = y.row(i).iter().cloned().collect();
                let (m, k) = check(&row, i)?;
                means[i] = m;
                counts[i] = k;
                s_f_sq += weights[i] * row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
        Observations::Ragged(rows) => {
            for (i, row) in rows.iter().enumerate() {
                let (m, k) = check(row, i)?;
                means[i] = m;
                counts[i] = k;
                s_f_sq += weights[i] * row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
            }
        }
    }
    let precisions = DVector::from_fn(n, |i, _| counts[i] as f64 * weights[i]);
    let n_total = counts.iter().sum();
    Ok(ReplicateStats { means, counts, precisions, s_f_sq, n_total })
}

type PointwiseFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
type FullDesignFn = dyn Fn(&DMatrix<f64>, &[f64]) -> Result<DVector<f64>> + Send + Sync;

enum SimKind {
    /// Called once per design row with (x, theta).
    Pointwise(Box<PointwiseFn>),
    /// Called once per evaluation with the whole design; lets trajectory
    /// models (ODE solvers etc) produce all outputs in a single run.
    FullDesign(Box<FullDesignFn>),
    /// A fitted emulator stands in for the simulator. The optional
    /// `loc_index` maps design rows to output coordinates of a
    /// multi-output emulator when those cannot be matched by location.
    Emulated { emulator: Arc<FittedEmulator>, loc_index: Option<Vec<usize>> },
}

/// A simulator bound into a calibration problem, with a call counter so the
/// cost of inference can be audited (emulated evaluations do not count).
#[derive(Clone)]
pub struct SimulatorBinding {
    kind: Arc<SimKind>,
    calls: Arc<AtomicU64>,
}

impl SimulatorBinding {
    /// Bind a cheap closure evaluated independently at each input row.
    pub fn pointwise(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        SimulatorBinding {
            kind: Arc::new(SimKind::Pointwise(Box::new(f))),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Bind a closure that produces outputs for a whole design at once.
    pub fn full_design(
        f: impl Fn(&DMatrix<f64>, &[f64]) -> Result<DVector<f64>> + Send + Sync + 'static,
    ) -> Self {
        SimulatorBinding {
            kind: Arc::new(SimKind::FullDesign(Box::new(f))),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Bind a fitted emulator in place of the simulator.
    pub fn from_emulator(emulator: Arc<FittedEmulator>, loc_index: Option<Vec<usize>>) -> Self {
        SimulatorBinding {
            kind: Arc::new(SimKind::Emulated { emulator, loc_index }),
            calls: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Number of underlying simulator invocations so far (pointwise bindings
    /// count one per row, full-design bindings one per evaluation, emulated
    /// bindings zero).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset_call_count(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn is_emulated(&self) -> bool {
        matches!(*self.kind, SimKind::Emulated { .. })
    }

    /// Evaluate the bound model at every row of `design` for parameters
    /// `theta`, returning one output per row.
    pub fn eval(&self, design: &DMatrix<f64>, theta: &[f64]) -> Result<DVector<f64>> {
        let n = design.nrows();
        let out = match &*self.kind {
            SimKind::Pointwise(f) => {
                self.calls.fetch_add(n as u64, Ordering::Relaxed);
                let mut v = DVector::<f64>::zeros(n);
                let mut x = vec![0.0; design.ncols()];
                for i in 0..n {
                    for (l, xl) in x.iter_mut().enumerate() {
                        *xl = design[(i, l)];
                    }
                    v[i] = f(&x, theta);
                }
                v
            }
            SimKind::FullDesign(f) => {
                self.calls.fetch_add(1, Ordering::Relaxed);
                let v = f(design, theta)?;
                if v.len() != n {
                    return Err(CalibError::Simulator(format!(
                        "full-design simulator returned {} values for {n} design rows",
                        v.len()
                    )));
                }
                v
            }
            SimKind::Emulated { emulator, loc_index } => {
                emulator.eval_as_simulator(design, theta, loc_index.as_deref())?
            }
        };
        for (i, v) in out.iter().enumerate() {
            if !v.is_finite() {
                return Err(CalibError::Simulator(format!(
                    "simulator output at design row {i} is not finite"
                )));
            }
        }
        Ok(out)
    }
}

/// A fully specified single-source calibration problem.
pub struct CalibrationProblem {
    design: DMatrix<f64>,
    observations: Observations,
    trend: Option<DMatrix<f64>>,
    theta_range: Vec<(f64, f64)>,
    output_weights: Vec<f64>,
    discrepancy: DiscrepancyType,
    kernel: KernelSpec,
    lambda_z: LambdaZ,
    simulator: SimulatorBinding,
    stats: ReplicateStats,
    domain_lengths: Vec<f64>,
}

impl CalibrationProblem {
    pub fn builder(
        design: DMatrix<f64>,
        observations: Observations,
        theta_range: Vec<(f64, f64)>,
        simulator: SimulatorBinding,
    ) -> CalibrationProblemBuilder {
        CalibrationProblemBuilder {
            design,
            observations,
            theta_range,
            simulator,
            trend: None,
            output_weights: None,
            discrepancy: DiscrepancyType::Gasp,
            kernel: None,
            lambda_z: LambdaZ::Auto,
        }
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p_x(&self) -> usize {
        self.design.ncols()
    }

    pub fn p_theta(&self) -> usize {
        self.theta_range.len()
    }

    pub fn observations(&self) -> &Observations {
        &self.observations
    }

    pub fn trend(&self) -> Option<&DMatrix<f64>> {
        self.trend.as_ref()
    }

    pub fn q_trend(&self) -> usize {
        self.trend.as_ref().map_or(0, |h| h.ncols())
    }

    pub fn theta_range(&self) -> &[(f64, f64)] {
        &self.theta_range
    }

    pub fn theta_widths(&self) -> Vec<f64> {
        self.theta_range.iter().map(|(lo, hi)| hi - lo).collect()
    }

    pub fn theta_in_range(&self, theta: &[f64]) -> bool {
        theta.len() == self.theta_range.len()
            && theta
                .iter()
                .zip(&self.theta_range)
                .all(|(t, (lo, hi))| t.is_finite() && *t >= *lo && *t <= *hi)
    }

    pub fn theta_midpoint(&self) -> Vec<f64> {
        self.theta_range.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.output_weights
    }

    pub fn discrepancy(&self) -> DiscrepancyType {
        self.discrepancy
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn lambda_z_setting(&self) -> LambdaZ {
        self.lambda_z
    }

    pub fn simulator(&self) -> &SimulatorBinding {
        &self.simulator
    }

    pub fn stats(&self) -> &ReplicateStats {
        &self.stats
    }

    /// Range of each design column (columns without spread count as 1 so
    /// that scale-dependent defaults stay finite).
    pub fn domain_lengths(&self) -> &[f64] {
        &self.domain_lengths
    }
}

pub struct CalibrationProblemBuilder {
    design: DMatrix<f64>,
    observations: Observations,
    theta_range: Vec<(f64, f64)>,
    simulator: SimulatorBinding,
    trend: Option<DMatrix<f64>>,
    output_weights: Option<Vec<f64>>,
    discrepancy: DiscrepancyType,
    kernel: Option<KernelSpec>,
    lambda_z: LambdaZ,
}

impl CalibrationProblemBuilder {
    /// Mean basis evaluated at the design, one row per input.
    pub fn trend(mut self, h: DMatrix<f64>) -> Self {
        self.trend = Some(h);
        self
    }

    /// Convenience: intercept-only trend.
    pub fn constant_trend(mut self) -> Self {
        let n = self.design.nrows();
        self.trend = Some(DMatrix::from_element(n, 1, 1.0));
        self
    }

    /// Per-input precision weights; noise variance at input i is sigma0^2 / w_i.
    pub fn output_weights(mut self, w: Vec<f64>) -> Self {
        self.output_weights = Some(w);
        self
    }

    pub fn discrepancy(mut self, d: DiscrepancyType) -> Self {
        self.discrepancy = d;
        self
    }

    pub fn kernel(mut self, spec: KernelSpec) -> Self {
        self.kernel = Some(spec);
        self
    }

    pub fn lambda_z(mut self, lz: LambdaZ) -> Self {
        self.lambda_z = lz;
        self
    }

    pub fn build(self) -> Result<CalibrationProblem> {
        let n = self.design.nrows();
        let p = self.design.ncols();
        if n == 0 || p == 0 {
            return Err(CalibError::invalid("design must have at least one row and column"));
        }
        if self.design.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::NonFinite("design entry".into()));
        }
        if self.observations.n() != n {
            return Err(CalibError::dim(format!(
                "{} observation rows for {n} design rows",
                self.observations.n()
            )));
        }
        if self.theta_range.is_empty() {
            return Err(CalibError::invalid("theta_range must have at least one entry"));
        }
        for (j, (lo, hi)) in self.theta_range.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(CalibError::invalid(format!(
                    "theta_range[{j}] must be a finite interval with lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        let output_weights = self.output_weights.unwrap_or_else(|| vec![1.0; n]);
        let stats = replicate_stats(&self.observations, &output_weights)?;
        if let Some(h) = &self.trend {
            if h.nrows() != n {
                return Err(CalibError::dim(format!(
                    "trend basis has {} rows for {n} design rows",
                    h.nrows()
                )));
            }
            if h.ncols() == 0 || h.ncols() > n {
                return Err(CalibError::invalid(
                    "trend basis must have between 1 and n columns",
                ));
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(CalibError::NonFinite("trend basis entry".into()));
            }
            let hth = h.transpose() * h;
            if Cholesky::new(hth).is_none() {
                return Err(CalibError::invalid("trend basis is rank deficient"));
            }
        }
        let kernel = match self.kernel {
            Some(k) => {
                if k.dim() != p {
                    return Err(CalibError::dim(format!(
                        "kernel covers {} dimensions, design has {p}",
                        k.dim()
                    )));
                }
                k
            }
            None => KernelSpec::uniform(KernelFamily::Matern52, p)?,
        };
        if let LambdaZ::Fixed(lz) = self.lambda_z {
            if !(lz.is_finite() && lz > 0.0) {
                return Err(CalibError::invalid(format!(
                    "fixed lambda_z must be finite and positive, got {lz}"
                )));
            }
        }
        let domain_lengths = (0..p)
            .map(|l| {
                let col = self.design.column(l);
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
        Ok(CalibrationProblem {
            design: self.design,
            observations: self.observations,
            trend: self.trend,
            theta_range: self.theta_range,
            output_weights,
            discrepancy: self.discrepancy,
            kernel,
            lambda_z: self.lambda_z,
            simulator: self.simulator,
            stats,
            domain_lengths,
        })
    }
}
