//! Correlation kernels, correlation matrices and the scaled-kernel transform.
//!
//! All kernels are separable products over input dimensions of one-dimensional
//! correlation functions of the absolute coordinate distance. Inputs are used
//! on their native scale; range parameters `gamma` absorb the units.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{CalibError, Result};

const SQRT5: f64 = 2.23606797749979;
const SQRT3: f64 = 1.7320508075688772;

/// One-dimensional correlation family.
///
/// * `Matern52`: (1 + u + u^2/3) e^{-u} with u = sqrt(5) d / gamma
/// * `Matern32`: (1 + u) e^{-u} with u = sqrt(3) d / gamma
/// * `PowExp`: exp(-(d/gamma)^alpha) with 0 < alpha <= 2, alpha fixed
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelFamily {
    Matern52,
    Matern32,
    PowExp { alpha: f64 },
}

impl KernelFamily {
    fn validate(&self) -> Result<()> {
        if let KernelFamily::PowExp { alpha } = self {
            if !(*alpha > 0.0 && *alpha <= 2.0) {
                return Err(CalibError::invalid(format!(
                    "power exponential roughness alpha must be in (0, 2], got {alpha}"
                )));
            }
        }
        Ok(())
    }

    /// Correlation at absolute distance `d >= 0` with range `gamma > 0`.
    #[inline]
    pub fn correlation(&self, d: f64, gamma: f64) -> f64 {
        let d = d.abs();
        match self {
            KernelFamily::Matern52 => {
                let u = SQRT5 * d / gamma;
                (1.0 + u + u * u / 3.0) * (-u).exp()
            }
            KernelFamily::Matern32 => {
                let u = SQRT3 * d / gamma;
                (1.0 + u) * (-u).exp()
            }
            KernelFamily::PowExp { alpha } => {
                if d == 0.0 {
                    1.0
                } else {
                    (-(d / gamma).powf(*alpha)).exp()
                }
            }
        }
    }

    /// Partial derivative of [`Self::correlation`] with respect to `gamma`.
    #[inline]
    pub fn d_correlation_d_gamma(&self, d: f64, gamma: f64) -> f64 {
        let d = d.abs();
        if d == 0.0 {
            return 0.0;
        }
        match self {
            // dK/dgamma = u^2 (1+u) e^{-u} / (3 gamma)
            KernelFamily::Matern52 => {
                let u = SQRT5 * d / gamma;
                u * u * (1.0 + u) * (-u).exp() / (3.0 * gamma)
            }
            // dK/dgamma = u^2 e^{-u} / gamma
            KernelFamily::Matern32 => {
                let u = SQRT3 * d / gamma;
                u * u * (-u).exp() / gamma
            }
            // dK/dgamma = K * alpha * s / gamma with s = (d/gamma)^alpha
            KernelFamily::PowExp { alpha } => {
                let s = (d / gamma).powf(*alpha);
                (-s).exp() * alpha * s / gamma
            }
        }
    }
}

/// Kernel family per input dimension of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    families: Vec<KernelFamily>,
}

impl KernelSpec {
    /// Same family for every input dimension.
    pub fn uniform(family: KernelFamily, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(CalibError::invalid("kernel must cover at least one dimension"));
        }
        family.validate()?;
        Ok(KernelSpec { families: vec![family; dim] })
    }

    /// Different family per dimension.
    pub fn per_dimension(families: Vec<KernelFamily>) -> Result<Self> {
        if families.is_empty() {
            return Err(CalibError::invalid("kernel must cover at least one dimension"));
        }
        for f in &families {
            f.validate()?;
        }
        Ok(KernelSpec { families })
    }

    pub fn dim(&self) -> usize {
        self.families.len()
    }

    pub fn family(&self, l: usize) -> KernelFamily {
        self.families[l]
    }

    pub fn families(&self) -> &[KernelFamily] {
        &self.families
    }
}

/// Positive range parameters, one per input dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeParams {
    gamma: Vec<f64>,
}

impl RangeParams {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(CalibError::invalid("range parameters must be non-empty"));
        }
        for (l, g) in gamma.iter().enumerate() {
            if !(g.is_finite() && *g > 0.0) {
                return Err(CalibError::invalid(format!(
                    "range parameter gamma[{l}] must be finite and positive, got {g}"
                )));
            }
        }
        Ok(RangeParams { gamma })
    }

    /// Build from log inverse ranges: gamma_l = exp(-log_beta_l).
    pub fn from_log_inverse_ranges(log_beta: &[f64]) -> Result<Self> {
        RangeParams::new(log_beta.iter().map(|b| (-b).exp()).collect())
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn log_inverse_ranges(&self) -> Vec<f64> {
        self.gamma.iter().map(|g| -(g.ln())).collect()
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

fn check_dims(spec: &KernelSpec, gamma: &RangeParams, p: usize, what: &str) -> Result<()> {
    if spec.dim() != p || gamma.dim() != p {
        return Err(CalibError::dim(format!(
            "{what}: input has {p} dimensions, kernel spec covers {}, ranges cover {}",
            spec.dim(),
            gamma.dim()
        )));
    }
    Ok(())
}

/// Product correlation between two points separated by coordinate distances `d`.
pub fn kernel_eval(spec: &KernelSpec, gamma: &RangeParams, d: &[f64]) -> Result<f64> {
    check_dims(spec, gamma, d.len(), "kernel_eval")?;
    let mut k = 1.0;
    for (l, dl) in d.iter().enumerate() {
        if !dl.is_finite() {
            return Err(CalibError::NonFinite(format!("distance component {l}")));
        }
        k *= spec.families[l].correlation(*dl, gamma.gamma[l]);
    }
    Ok(k)
}

/// Correlation matrix of a design together with its Cholesky factor.
#[derive(Clone)]
pub struct CorrelationMatrix {
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl CorrelationMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// Nugget that had to be added to the diagonal for the factorization
    /// to succeed (0 whenever the plain matrix is numerically SPD).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn log_det(&self) -> f64 {
        chol_log_det(&self.chol)
    }
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Cholesky with an escalating diagonal jitter: first the plain matrix, then
/// jitter from 1e-10 up to 1e-4 times the mean diagonal in decade steps.
pub(crate) fn chol_with_jitter(
    m: &DMatrix<f64>,
    context: &str,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n {
        return Err(CalibError::dim(format!("{context}: matrix must be square and non-empty")));
    }
    let mean_diag = m.diagonal().mean();
    let scale = if mean_diag.is_finite() && mean_diag > 0.0 { mean_diag } else { 1.0 };

    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, 0.0));
    }
    let mut jitter = 1e-10 * scale;
    let max_jitter = 1e-4 * scale;
    while jitter <= max_jitter * (1.0 + 1e-12) {
        let mut trial = m.clone();
        for i in 0..n {
            trial[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(trial) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(CalibError::SingularMatrix { jitter: max_jitter, context: context.to_string() })
}

/// Correlation matrix entries without factorization (hot path for likelihoods).
pub(crate) fn corr_matrix_raw(
    design: &DMatrix<f64>,
    spec: &KernelSpec,
    gamma: &RangeParams,
) -> Result<DMatrix<f64>> {
    let n = design.nrows();
    let p = design.ncols();
    if n == 0 {
        return Err(CalibError::invalid("design must have at least one row"));
    }
    check_dims(spec, gamma, p, "corr_matrix")?;
    let mut r = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let mut k = 1.0;
            for l in 0..p {
                let d = design[(i, l)] - design[(j, l)];
                k *= spec.families[l].correlation(d, gamma.gamma[l]);
            }
            r[(i, j)] = k;
            r[(j, i)] = k;
        }
    }
    Ok(r)
}

/// Correlation matrix of `design` (n x p), factorized.
pub fn corr_matrix(
    design: &DMatrix<f64>,
    spec: &KernelSpec,
    gamma: &RangeParams,
) -> Result<CorrelationMatrix> {
    let matrix = corr_matrix_raw(design, spec, gamma)?;
    let (chol, jitter) = chol_with_jitter(&matrix, "design correlation")?;
    Ok(CorrelationMatrix { matrix, chol, jitter })
}

/// Entrywise derivative of the correlation matrix with respect to `gamma[dim]`.
/// Uses dR_ij/dgamma_l = R_ij * K_l'(d_ij)/K_l(d_ij) evaluated stably from parts.
pub(crate) fn corr_deriv_gamma(
    design: &DMatrix<f64>,
    spec: &KernelSpec,
    gamma: &RangeParams,
    dim: usize,
) -> DMatrix<f64> {
    let n = design.nrows();
    let p = design.ncols();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let mut rest = 1.0;
            for l in 0..p {
                if l == dim {
                    continue;
                }
                let d = design[(i, l)] - design[(j, l)];
                rest *= spec.families[l].correlation(d, gamma.gamma[l]);
            }
            let d = design[(i, dim)] - design[(j, dim)];
            let v = rest * spec.families[dim].d_correlation_d_gamma(d, gamma.gamma[dim]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Correlations between every design row and a new point `x_star`.
pub fn cross_corr(
    design: &DMatrix<f64>,
    x_star: &[f64],
    spec: &KernelSpec,
    gamma: &RangeParams,
) -> Result<DVector<f64>> {
    let p = design.ncols();
    if x_star.len() != p {
        return Err(CalibError::dim(format!(
            "cross_corr: point has {} coordinates, design has {p}",
            x_star.len()
        )));
    }
    check_dims(spec, gamma, p, "cross_corr")?;
    let n = design.nrows();
    let mut r = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut k = 1.0;
        for l in 0..p {
            let d = design[(i, l)] - x_star[l];
            k *= spec.families[l].correlation(d, gamma.gamma[l]);
        }
        r[i] = k;
    }
    Ok(r)
}

/// Scaled-kernel quantities for the S-GaSP discrepancy.
///
/// With `A = R + (n/lambda_z) I` the scaled process has discrete covariance
/// `R_z = R - R A^{-1} R` and cross covariance
/// `k_z(a, b) = k(a, b) - r(a)' A^{-1} r(b)`.
pub struct ScaledCorrelation {
    matrix: DMatrix<f64>,
    a_chol: Cholesky<f64, Dyn>,
    a_jitter: f64,
    lambda_z: f64,
}

impl ScaledCorrelation {
    /// The scaled correlation matrix `R_z` (not in general unit-diagonal).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn lambda_z(&self) -> f64 {
        self.lambda_z
    }

    pub fn a_jitter(&self) -> f64 {
        self.a_jitter
    }

    /// Solve `A x = b`.
    pub fn a_solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.a_chol.solve(b)
    }

    pub(crate) fn a_solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.a_chol.solve(b)
    }

    /// Scaled cross-correlation vector between the design and one new point:
    /// `r_z(x*) = r(x*) - R A^{-1} r(x*)`.
    pub fn cross_vec(&self, base: &DMatrix<f64>, r_star: &DVector<f64>) -> DVector<f64> {
        r_star - base * self.a_chol.solve(r_star)
    }

    /// Scaled self-correlation of a new point: `k_z(x*, x*) = 1 - r' A^{-1} r`.
    pub fn self_corr(&self, r_star: &DVector<f64>) -> f64 {
        1.0 - r_star.dot(&self.a_chol.solve(r_star))
    }
}

/// Scaled correlation matrix for a given `lambda_z > 0`.
pub fn scaled_corr(base: &CorrelationMatrix, lambda_z: f64) -> Result<ScaledCorrelation> {
    scaled_corr_raw(base.matrix(), lambda_z)
}

pub(crate) fn scaled_corr_raw(r: &DMatrix<f64>, lambda_z: f64) -> Result<ScaledCorrelation> {
    if !(lambda_z.is_finite() && lambda_z > 0.0) {
        return Err(CalibError::invalid(format!(
            "lambda_z must be finite and positive, got {lambda_z}"
        )));
    }
    let n = r.nrows();
    let c = n as f64 / lambda_z;
    let mut a = r.clone();
    for i in 0..n {
        a[(i, i)] += c;
    }
    let (a_chol, a_jitter) = chol_with_jitter(&a, "scaled-kernel A = R + (n/lambda_z) I")?;
    let matrix = r - r * a_chol.solve(r);
    Ok(ScaledCorrelation { matrix, a_chol, a_jitter, lambda_z })
}

/// Scaled cross-correlation between two arbitrary points.
pub fn scaled_cross(
    x_a: &[f64],
    x_b: &[f64],
    scaled: &ScaledCorrelation,
    design: &DMatrix<f64>,
    spec: &KernelSpec,
    gamma: &RangeParams,
) -> Result<f64> {
    if x_a.len() != x_b.len() {
        return Err(CalibError::dim("scaled_cross: point dimensions differ"));
    }
    let d: Vec<f64> = x_a.iter().zip(x_b).map(|(a, b)| a - b).collect();
    let k = kernel_eval(spec, gamma, &d)?;
    let ra = cross_corr(design, x_a, spec, gamma)?;
    let rb = cross_corr(design, x_b, spec, gamma)?;
    Ok(k - ra.dot(&scaled.a_solve_vec(&rb)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Reference values computed from the closed forms with 50-digit
    // arithmetic (mpmath) and frozen here before the module was written.
    #[test]
    fn one_dimensional_kernels_match_reference_values() {
        let m52 = KernelFamily::Matern52;
        assert_relative_eq!(m52.correlation(1.0, 1.0), 0.523994108831820311, max_relative = 1e-15);
        assert_relative_eq!(m52.correlation(0.5, 2.0), 0.950959921678632923, max_relative = 1e-15);
        let m32 = KernelFamily::Matern32;
        assert_relative_eq!(m32.correlation(1.0, 1.0), 0.483357724596507651, max_relative = 1e-15);
        assert_relative_eq!(m32.correlation(2.5, 0.8), 0.0285989634895111323, max_relative = 1e-15);
        let pe = KernelFamily::PowExp { alpha: 1.9 };
        assert_relative_eq!(pe.correlation(0.5, 1.3), 0.849794172817129723, max_relative = 1e-15);
        let pe1 = KernelFamily::PowExp { alpha: 1.0 };
        assert_relative_eq!(pe1.correlation(1.0, 1.0), 0.367879441171442322, max_relative = 1e-15);
    }

    #[test]
    fn product_kernel_multiplies_dimensions() {
        let spec = KernelSpec::per_dimension(vec![KernelFamily::Matern52, KernelFamily::Matern32])
            .unwrap();
        let gamma = RangeParams::new(vec![0.7, 1.1]).unwrap();
        let k = kernel_eval(&spec, &gamma, &[0.3, -0.4]).unwrap();
        assert_relative_eq!(k, 0.754013194792542598, max_relative = 1e-15);
    }

    #[test]
    fn kernels_are_one_at_zero_distance() {
        for fam in [
            KernelFamily::Matern52,
            KernelFamily::Matern32,
            KernelFamily::PowExp { alpha: 1.9 },
        ] {
            assert_eq!(fam.correlation(0.0, 0.7), 1.0);
        }
    }

    #[test]
    fn pow_exp_alpha_validation() {
        assert!(KernelSpec::uniform(KernelFamily::PowExp { alpha: 2.0 }, 1).is_ok());
        assert!(KernelSpec::uniform(KernelFamily::PowExp { alpha: 0.0 }, 1).is_err());
        assert!(KernelSpec::uniform(KernelFamily::PowExp { alpha: 2.1 }, 1).is_err());
    }

    #[test]
    fn range_params_reject_bad_values() {
        assert!(RangeParams::new(vec![1.0, -0.5]).is_err());
        assert!(RangeParams::new(vec![f64::NAN]).is_err());
        assert!(RangeParams::new(vec![]).is_err());
        let r = RangeParams::from_log_inverse_ranges(&[0.5, -1.0]).unwrap();
        assert_relative_eq!(r.gamma()[0], (-0.5f64).exp());
        assert_relative_eq!(r.gamma()[1], 1.0f64.exp());
    }

    #[test]
    fn cross_corr_matches_matrix_column() {
        let design = DMatrix::from_row_slice(4, 2, &[0.1, 0.9, 0.4, 0.2, 0.8, 0.5, 0.3, 0.7]);
        let spec = KernelSpec::uniform(KernelFamily::Matern52, 2).unwrap();
        let gamma = RangeParams::new(vec![0.4, 0.6]).unwrap();
        let cm = corr_matrix(&design, &spec, &gamma).unwrap();
        let x2: Vec<f64> = design.row(2).iter().cloned().collect();
        let r = cross_corr(&design, &x2, &spec, &gamma).unwrap();
        for i in 0..4 {
            assert_relative_eq!(r[i], cm.matrix()[(i, 2)], max_relative = 1e-14);
        }
    }

    #[test]
    fn duplicate_rows_need_only_tiny_jitter() {
        let design = DMatrix::from_row_slice(3, 1, &[0.5, 0.5, 0.9]);
        let spec = KernelSpec::uniform(KernelFamily::Matern52, 1).unwrap();
        let gamma = RangeParams::new(vec![0.3]).unwrap();
        let cm = corr_matrix(&design, &spec, &gamma).unwrap();
        assert!(cm.jitter() > 0.0 && cm.jitter() <= 1e-4, "jitter {}", cm.jitter());
    }

    // Hand-computable 2x2 oracle for the scaled transform: with
    // R = [[1, rho], [rho, 1]] and A = R + cI the inverse of A is
    // [[1+c, -rho], [-rho, 1+c]] / ((1+c)^2 - rho^2), so R_z follows by
    // explicit 2x2 multiplication.
    #[test]
    fn scaled_corr_matches_two_by_two_oracle() {
        let design = DMatrix::from_row_slice(2, 1, &[0.2, 0.7]);
        let spec = KernelSpec::uniform(KernelFamily::Matern52, 1).unwrap();
        let gamma = RangeParams::new(vec![0.5]).unwrap();
        let cm = corr_matrix(&design, &spec, &gamma).unwrap();
        let rho = cm.matrix()[(0, 1)];
        let lambda_z = 3.0;
        let c = 2.0 / lambda_z;
        let det = (1.0 + c) * (1.0 + c) - rho * rho;
        let ainv = [
            [(1.0 + c) / det, -rho / det],
            [-rho / det, (1.0 + c) / det],
        ];
        let r = [[1.0, rho], [rho, 1.0]];
        // R_z = R - R Ainv R
        let mut expected = [[0.0f64; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += r[i][a] * ainv[a][b] * r[b][j];
                    }
                }
                expected[i][j] = r[i][j] - acc;
            }
        }
        let sc = scaled_corr(&cm, lambda_z).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(sc.matrix()[(i, j)], expected[i][j], max_relative = 1e-12);
            }
        }
        // scaled_cross at design points must reproduce R_z entries
        let kz = scaled_cross(&[0.2], &[0.7], &sc, &design, &spec, &gamma).unwrap();
        assert_relative_eq!(kz, expected[0][1], max_relative = 1e-12);
        // and the batched helpers agree with the scalar one
        let r_star = cross_corr(&design, &[0.7], &spec, &gamma).unwrap();
        let rz_vec = sc.cross_vec(cm.matrix(), &r_star);
        assert_relative_eq!(rz_vec[0], expected[0][1], max_relative = 1e-12);
        assert_relative_eq!(rz_vec[1], expected[1][1], max_relative = 1e-12);
        let kz_self = scaled_cross(&[0.7], &[0.7], &sc, &design, &spec, &gamma).unwrap();
        assert_relative_eq!(sc.self_corr(&r_star), kz_self, max_relative = 1e-12);
    }

    #[test]
    fn scaled_corr_rejects_bad_lambda() {
        let design = DMatrix::from_row_slice(2, 1, &[0.2, 0.7]);
        let spec = KernelSpec::uniform(KernelFamily::Matern52, 1).unwrap();
        let gamma = RangeParams::new(vec![0.5]).unwrap();
        let cm = corr_matrix(&design, &spec, &gamma).unwrap();
        assert!(scaled_corr(&cm, 0.0).is_err());
        assert!(scaled_corr(&cm, -1.0).is_err());
        assert!(scaled_corr(&cm, f64::INFINITY).is_err());
    }

    fn arb_family() -> impl Strategy<Value = KernelFamily> {
        prop_oneof![
            Just(KernelFamily::Matern52),
            Just(KernelFamily::Matern32),
            (0.2f64..=2.0).prop_map(|alpha| KernelFamily::PowExp { alpha }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        // Correlation matrices on well-separated designs factorize with at
        // most a tiny jitter, have unit diagonal and are symmetric.
        #[test]
        fn correlation_matrices_are_spd(
            fam in arb_family(),
            n in 2usize..8,
            p in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            // jittered grid keeps points at least 0.04 apart in dim 0
            let mut design = DMatrix::<f64>::zeros(n, p);
            for i in 0..n {
                for l in 0..p {
                    design[(i, l)] = if l == 0 {
                        i as f64 / n as f64 + 0.3 * rng.random::<f64>() / n as f64
                    } else {
                        rng.random::<f64>()
                    };
                }
            }
            let spec = KernelSpec::uniform(fam, p).unwrap();
            let gamma = RangeParams::new((0..p).map(|_| 0.1 + rng.random::<f64>()).collect()).unwrap();
            let cm = corr_matrix(&design, &spec, &gamma).unwrap();
            prop_assert!(cm.jitter() <= 1e-4);
            for i in 0..n {
                prop_assert!((cm.matrix()[(i, i)] - 1.0).abs() < 1e-15);
                for j in 0..n {
                    prop_assert!((cm.matrix()[(i, j)] - cm.matrix()[(j, i)]).abs() < 1e-15);
                    prop_assert!(cm.matrix()[(i, j)] <= 1.0 + 1e-15);
                    prop_assert!(cm.matrix()[(i, j)] > 0.0);
                }
            }
        }

        // v' R_z v <= v' R v for any v: the subtracted term is PSD.
        #[test]
        fn scaling_shrinks_quadratic_forms(
            fam in arb_family(),
            lambda_z in 1e-3f64..1e3,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let n = 6;
            let design = DMatrix::<f64>::from_fn(n, 2, |i, l| {
                if l == 0 { i as f64 / n as f64 } else { rng.random::<f64>() }
            });
            let spec = KernelSpec::uniform(fam, 2).unwrap();
            let gamma = RangeParams::new(vec![0.4, 0.8]).unwrap();
            let cm = corr_matrix(&design, &spec, &gamma).unwrap();
            let sc = scaled_corr(&cm, lambda_z).unwrap();
            let v = DVector::<f64>::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
            let qr = (cm.matrix() * &v).dot(&v);
            let qz = (sc.matrix() * &v).dot(&v);
            prop_assert!(qz <= qr + 1e-9 * qr.abs().max(1.0));
            // R_z stays symmetric PSD-ish: its quadratic form is nonnegative
            prop_assert!(qz >= -1e-9);
        }

        // The closed-form gamma derivatives match central differences.
        #[test]
        fn kernel_gamma_derivative_matches_fd(
            fam in arb_family(),
            d in 0.01f64..3.0,
            gamma in 0.1f64..4.0,
        ) {
            let h = 1e-6 * gamma;
            let fd = (fam.correlation(d, gamma + h) - fam.correlation(d, gamma - h)) / (2.0 * h);
            let an = fam.d_correlation_d_gamma(d, gamma);
            prop_assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                "family {:?} d {} gamma {}: fd {} analytic {}", fam, d, gamma, fd, an);
        }
    }
}
