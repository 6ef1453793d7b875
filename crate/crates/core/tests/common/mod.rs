//! Dense replicate-level likelihood oracle shared by the oracle and
//! acceptance test targets. Reimplements the kernel and scaled-kernel
//! algebra independently of the library internals.
#![allow(dead_code)]

use bayescal::kernels::RangeParams;
use bayescal::model::{CalibrationProblem, DiscrepancyType, Observations, SimulatorBinding};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

pub fn matern52_own(d: f64, gamma: f64) -> f64 {
    let r = 5f64.sqrt() * d.abs() / gamma;
    (1.0 + r + r * r / 3.0) * (-r).exp()
}

pub fn corr_own(design: &DMatrix<f64>, gamma: &[f64]) -> DMatrix<f64> {
    let n = design.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        (0..design.ncols())
            .map(|l| matern52_own(design[(i, l)] - design[(j, l)], gamma[l]))
            .product()
    })
}

/// Scaled kernel through the explicit inverse, nothing shared with the
/// library's factorization-based route.
pub fn scaled_own(r: &DMatrix<f64>, lambda_z: f64) -> DMatrix<f64> {
    let n = r.nrows();
    let mut a = r.clone();
    for i in 0..n {
        a[(i, i)] += n as f64 / lambda_z;
    }
    let a_inv = a.try_inverse().expect("oracle: A invertible");
    r - r * a_inv * r
}

pub struct Case {
    pub design: DMatrix<f64>,
    pub obs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub trend: bool,
    pub discrepancy: DiscrepancyType,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub eta: f64,
}

pub fn random_case(rng: &mut ChaCha20Rng, discrepancy: DiscrepancyType) -> Case {
    let n = rng.random_range(2..=6usize);
    let p = rng.random_range(1..=2usize);
    let design = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>());
    let obs: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let k = rng.random_range(1..=4usize);
            (0..k).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
        })
        .collect();
    let weights: Vec<f64> = if rng.random::<bool>() {
        vec![1.0; n]
    } else {
        (0..n).map(|_| 0.5 + 1.5 * rng.random::<f64>()).collect()
    };
    Case {
        design,
        obs,
        weights,
        trend: rng.random::<bool>(),
        discrepancy,
        theta: vec![rng.random::<f64>() * 4.0 - 2.0],
        gamma: (0..p).map(|_| 0.15 + 1.35 * rng.random::<f64>()).collect(),
        eta: 0.05 + 3.0 * rng.random::<f64>(),
    }
}

pub fn build_problem(case: &Case) -> CalibrationProblem {
    let mut b = CalibrationProblem::builder(
        case.design.clone(),
        Observations::Ragged(case.obs.clone()),
        vec![(-3.0, 3.0)],
        SimulatorBinding::pointwise(|x, th| th[0] * x[0]),
    )
    .discrepancy(case.discrepancy)
    .output_weights(case.weights.clone());
    if case.trend {
        b = b.constant_trend();
    }
    b.build().unwrap()
}

pub fn kernel_args(case: &Case) -> Option<(RangeParams, f64)> {
    match case.discrepancy {
        DiscrepancyType::NoDiscrepancy => None,
        _ => Some((RangeParams::new(case.gamma.clone()).unwrap(), case.eta)),
    }
}

pub struct DenseEval {
    pub loglik: f64,
    pub log_det_w: f64,
    pub quad: f64,
    pub trend_hat: Option<f64>,
}

/// Full N x N profile likelihood over every replicate row.
pub fn dense_profile(case: &Case, lambda_z: Option<f64>) -> DenseEval {
    let counts: Vec<usize> = case.obs.iter().map(|r| r.len()).collect();
    let n_total: usize = counts.iter().sum();

    let base = match case.discrepancy {
        DiscrepancyType::NoDiscrepancy => None,
        DiscrepancyType::Gasp => Some(corr_own(&case.design, &case.gamma)),
        DiscrepancyType::Sgasp => Some(scaled_own(
            &corr_own(&case.design, &case.gamma),
            lambda_z.expect("oracle needs the scale the library used"),
        )),
    };

    // expand to replicate rows
    let mut w_full = DMatrix::<f64>::zeros(n_total, n_total);
    let mut row_of = Vec::with_capacity(n_total);
    for (i, k) in counts.iter().enumerate() {
        for _ in 0..*k {
            row_of.push(i);
        }
    }
    for a in 0..n_total {
        for b in 0..n_total {
            if let Some(kmat) = &base {
                w_full[(a, b)] = kmat[(row_of[a], row_of[b])] / case.eta;
            }
        }
    }
    for a in 0..n_total {
        w_full[(a, a)] += 1.0 / case.weights[row_of[a]];
    }

    let y_full = DVector::from_iterator(
        n_total,
        case.obs.iter().flat_map(|r| r.iter().cloned()),
    );
    let f_full = DVector::from_fn(n_total, |a, _| case.theta[0] * case.design[(row_of[a], 0)]);

    let chol = Cholesky::new(w_full.clone()).expect("oracle: W positive definite");
    let log_det_w = 2.0 * (0..n_total).map(|a| chol.l_dirty()[(a, a)].ln()).sum::<f64>();

    let raw = &y_full - &f_full;
    let (resid, trend_hat) = if case.trend {
        let ones = DVector::from_element(n_total, 1.0);
        let w_inv_one = chol.solve(&ones);
        let hat = raw.dot(&w_inv_one) / ones.dot(&w_inv_one);
        (raw - ones * hat, Some(hat))
    } else {
        (raw, None)
    };
    let quad = resid.dot(&chol.solve(&resid));
    DenseEval {
        loglik: -0.5 * log_det_w - (n_total as f64 / 2.0) * quad.ln(),
        log_det_w,
        quad,
        trend_hat,
    }
}
