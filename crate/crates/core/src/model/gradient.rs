//! Analytic gradients of the profile log likelihood.
//!
//! For `l = -1/2 log|C| - N/2 log(S_K^2 + S_f^2)` with
//! `S_K^2 = ystar' Q ystar`, `Q = C^{-1} - C^{-1} H (H' C^{-1} H)^{-1} H' C^{-1}`
//! and any covariance parameter `tau`,
//!
//! ```text
//! dl/dtau = -1/2 tr(C^{-1} Cdot) + N/2 * (w' Cdot w) / (S_K^2 + S_f^2),
//! w = Q ystar,
//! ```
//!
//! using dQ/dtau = -Q Cdot Q and Q ystar = w. For the calibration inputs,
//! since only `ystar = ybar - f(theta)` moves,
//! `dl/dtheta_i = N * (w' df/dtheta_i) / (S_K^2 + S_f^2)`.
//!
//! Covariance derivatives:
//! * GaSP, gamma_l: `Cdot = Rdot_l / eta`
//! * GaSP, eta:     `Cdot = -R / eta^2`
//! * S-GaSP with `A = R + cI`, `c = n / lambda_z`, `M = A^{-1} R`, `B = I - M`
//!   and `G = M' M`: `dR_z = B' Rdot B + cdot * G`, so
//!   `Cdot(gamma_l) = (B' Rdot_l B + c_gamma_l * G) / eta` and
//!   `Cdot(eta) = -R_z / eta^2 + c_eta * G / eta`. Under the default
//!   `lambda_z = (eta ||gamma_scaled|| / n)^{-1/2}` the scale couples back:
//!   `c = sqrt(n eta) ||gamma_scaled||^{1/2}`, `c_eta = c / (2 eta)`,
//!   `c_gamma_l = c * gamma_l / (2 ||gamma_scaled||^2 L_l^2)`.
//!
//! Gradients are reported in the sampling coordinates
//! `(theta, log beta, log eta)` with `gamma = exp(-log beta)`, so the chain
//! factors are `-gamma_l` and `eta`. The simulator derivative `df/dtheta_i`
//! is a central difference with step `1e-4` of the parameter range width.

use nalgebra::DMatrix;

use crate::error::{CalibError, Result};
use crate::kernels::{corr_deriv_gamma, RangeParams};
use crate::model::likelihood::{build_cov, CovOp};
use crate::model::problem::{CalibrationProblem, DiscrepancyType, LambdaZ};

const THETA_FD_FRACTION: f64 = 1e-4;
const DEGENERATE_SS: f64 = 1e-300;

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Profile log likelihood and its gradient in one pass. The gradient layout
/// is `[d theta..., d log_beta..., d log_eta]`; the kernel block is absent
/// for the no-discrepancy model. At a degenerate (zero-residual) point the
/// clamped likelihood value is returned with a zero gradient.
pub fn value_and_grad(
    problem: &CalibrationProblem,
    theta: &[f64],
    gamma: Option<&RangeParams>,
    eta: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    if theta.len() != problem.p_theta() {
        return Err(CalibError::dim(format!(
            "theta has {} entries, problem expects {}",
            theta.len(),
            problem.p_theta()
        )));
    }
    let disc = problem.discrepancy();
    let parts = build_cov(problem, disc, gamma, eta, None)?;
    let stats = problem.stats();
    let n = problem.n();
    let n_total = stats.n_total as f64;

    let f = problem.simulator().eval(problem.design(), theta)?;
    let y_star = &stats.means - f;

    // w = Q ystar and the residual quadratic form
    let u = parts.cov.solve_vec(&y_star);
    let w = match problem.trend() {
        Some(h) => {
            let ih = parts.cov.solve_mat(h);
            let hih = h.transpose() * &ih;
            let cholq = nalgebra::Cholesky::new(hih).ok_or_else(|| {
                CalibError::invalid("trend precision matrix is not positive definite")
            })?;
            let t = cholq.solve(&(h.transpose() * &u));
            &u - ih * t
        }
        None => u,
    };
    let s_k_sq = y_star.dot(&w).max(0.0);
    let denom = s_k_sq + stats.s_f_sq;
    let p_kernel = match disc {
        DiscrepancyType::NoDiscrepancy => 0,
        _ => problem.p_x() + 1,
    };
    let loglik = -0.5 * parts.cov.log_det() - 0.5 * n_total * denom.max(DEGENERATE_SS).ln();
    if denom <= DEGENERATE_SS {
        return Ok((loglik, vec![0.0; theta.len() + p_kernel]));
    }

    let mut grad = Vec::with_capacity(theta.len() + p_kernel);

    // calibration parameters: N (w' fdot_i) / denom via central differences
    let widths = problem.theta_widths();
    for i in 0..theta.len() {
        let h_i = THETA_FD_FRACTION * widths[i];
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[i] += h_i;
        tm[i] -= h_i;
        let fp = problem.simulator().eval(problem.design(), &tp)?;
        let fm = problem.simulator().eval(problem.design(), &tm)?;
        let fdot = (fp - fm) / (2.0 * h_i);
        grad.push(n_total * w.dot(&fdot) / denom);
    }

    if p_kernel > 0 {
        let gamma = gamma.expect("kernel gradient requires gamma");
        let eta = eta.expect("kernel gradient requires eta");
        let r = parts.r.as_ref().expect("kernel gradient requires base correlation");
        let inv = match &parts.cov {
            CovOp::Dense { chol, .. } => chol.inverse(),
            CovOp::Diagonal { .. } => unreachable!("GP discrepancy covariance is dense"),
        };
        // generic accumulator for one covariance derivative
        let term = |cdot: &DMatrix<f64>| -> f64 {
            -0.5 * frob_dot(&inv, cdot) + 0.5 * n_total * (cdot * &w).dot(&w) / denom
        };

        match disc {
            DiscrepancyType::Gasp => {
                for l in 0..problem.p_x() {
                    let rdot = corr_deriv_gamma(problem.design(), problem.kernel(), gamma, l);
                    let d_gamma = term(&(rdot / eta));
                    grad.push(-gamma.gamma()[l] * d_gamma);
                }
                let d_eta = term(&(-r / (eta * eta)));
                grad.push(eta * d_eta);
            }
            DiscrepancyType::Sgasp => {
                let scaled = parts.scaled.as_ref().expect("S-GaSP covariance parts");
                let lambda_z = parts.lambda_z.expect("S-GaSP lambda_z");
                let auto = matches!(problem.lambda_z_setting(), LambdaZ::Auto);
                let c = n as f64 / lambda_z;
                let m = scaled.a_solve_mat(r);
                let mut b = -m.clone();
                for i in 0..n {
                    b[(i, i)] += 1.0;
                }
                let g_mat = m.transpose() * &m;
                // reusable pieces: trace and quadratic form of G, and the
                // projected inverse for the B' Rdot B traces
                let bw = &b * &w;
                let p_mat = &b * &inv * b.transpose();
                let g_term = term(&g_mat);
                let norm_sq: f64 = gamma
                    .gamma()
                    .iter()
                    .zip(problem.domain_lengths())
                    .map(|(g, len)| (g / len) * (g / len))
                    .sum();
                for l in 0..problem.p_x() {
                    let rdot = corr_deriv_gamma(problem.design(), problem.kernel(), gamma, l);
                    // term(B' Rdot B / eta) without forming the product
                    let tr_part = -0.5 * frob_dot(&p_mat, &rdot) / eta;
                    let quad_part =
                        0.5 * n_total * (&rdot * &bw).dot(&bw) / (eta * denom);
                    let mut d_gamma = tr_part + quad_part;
                    if auto {
                        let g_l = gamma.gamma()[l];
                        let len = problem.domain_lengths()[l];
                        let c_dot = c * g_l / (2.0 * norm_sq * len * len);
                        d_gamma += c_dot * g_term / eta;
                    }
                    grad.push(-gamma.gamma()[l] * d_gamma);
                }
                let mut cdot_eta = -scaled.matrix() / (eta * eta);
                if auto {
                    let c_dot = c / (2.0 * eta);
                    cdot_eta += &g_mat * (c_dot / eta);
                }
                let d_eta = term(&cdot_eta);
                grad.push(eta * d_eta);
            }
            DiscrepancyType::NoDiscrepancy => unreachable!(),
        }
    }
    Ok((loglik, grad))
}

/// Gradient of the profile log likelihood in `(theta, log beta, log eta)`.
pub fn profile_grad(
    problem: &CalibrationProblem,
    theta: &[f64],
    gamma: Option<&RangeParams>,
    eta: Option<f64>,
) -> Result<Vec<f64>> {
    value_and_grad(problem, theta, gamma, eta).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::model::likelihood::profile_loglik;
    use crate::model::problem::{Observations, SimulatorBinding};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};

    fn fd_check(problem: &CalibrationProblem, theta: &[f64], log_beta: &[f64], log_eta: f64) {
        let gamma = RangeParams::from_log_inverse_ranges(log_beta).unwrap();
        let eta = log_eta.exp();
        let (val, grad) = value_and_grad(problem, theta, Some(&gamma), Some(eta)).unwrap();
        let eval = profile_loglik(problem, theta, Some((&gamma, eta))).unwrap();
        assert!(
            (val - eval.loglik).abs() <= 1e-10 * (1.0 + val.abs()),
            "value mismatch: {} vs {}",
            val,
            eval.loglik
        );

        let p_t = theta.len();
        let p_x = log_beta.len();
        let eval_at = |z: &[f64]| -> f64 {
            let g = RangeParams::from_log_inverse_ranges(&z[p_t..p_t + p_x]).unwrap();
            profile_loglik(problem, &z[..p_t], Some((&g, z[p_t + p_x].exp())))
                .unwrap()
                .loglik
        };
        let mut z: Vec<f64> = theta.to_vec();
        z.extend_from_slice(log_beta);
        z.push(log_eta);
        let scale: f64 = grad.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for i in 0..z.len() {
            let h = 1e-5 * (1.0 + z[i].abs());
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (eval_at(&zp) - eval_at(&zm)) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-3 * scale).max(1e-8);
            let rel = (fd - grad[i]).abs() / denom;
            assert!(
                rel < 1e-5,
                "component {i}: analytic {} vs fd {} (rel {rel:.2e})",
                grad[i],
                fd
            );
        }
    }

    fn random_problem(
        disc: DiscrepancyType,
        with_trend: bool,
        replicated: bool,
        lambda_z: LambdaZ,
        seed: u64,
    ) -> CalibrationProblem {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let n = 6;
        let design = DMatrix::from_fn(n, 2, |i, l| {
            if l == 0 {
                (i as f64 + 0.3 * rng.random::<f64>()) / n as f64
            } else {
                2.0 * rng.random::<f64>()
            }
        });
        let obs = if replicated {
            Observations::Replicates(DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>() * 2.0 - 1.0))
        } else {
            Observations::Vector(DVector::from_fn(n, |_, _| rng.random::<f64>() * 2.0 - 1.0))
        };
        let sim = SimulatorBinding::pointwise(|x, th| {
            th[0] * (x[0] * th[1]).sin() + 0.3 * th[1] * x[1]
        });
        let mut b = CalibrationProblem::builder(
            design,
            obs,
            vec![(-2.0, 2.0), (-3.0, 3.0)],
            sim,
        )
        .discrepancy(disc)
        .lambda_z(lambda_z)
        .kernel(
            KernelSpec::per_dimension(vec![
                KernelFamily::Matern52,
                KernelFamily::PowExp { alpha: 1.9 },
            ])
            .unwrap(),
        );
        if with_trend {
            b = b.constant_trend();
        }
        b.build().unwrap()
    }

    #[test]
    fn gasp_gradient_matches_fd() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        for case in 0..6 {
            let problem = random_problem(
                DiscrepancyType::Gasp,
                case % 2 == 0,
                case % 3 == 0,
                LambdaZ::Auto,
                100 + case,
            );
            let theta = [rng.random::<f64>() - 0.5, rng.random::<f64>() * 2.0 - 1.0];
            let log_beta = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let log_eta = rng.random::<f64>() * 2.0 - 1.0;
            fd_check(&problem, &theta, &log_beta, log_eta);
        }
    }

    #[test]
    fn sgasp_gradient_matches_fd_auto_and_fixed() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(17);
        for case in 0..6 {
            let lz = if case % 2 == 0 { LambdaZ::Auto } else { LambdaZ::Fixed(7.5) };
            let problem =
                random_problem(DiscrepancyType::Sgasp, case % 2 == 1, case % 3 == 1, lz, 200 + case);
            let theta = [rng.random::<f64>() - 0.5, rng.random::<f64>() * 2.0 - 1.0];
            let log_beta = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let log_eta = rng.random::<f64>() * 2.0 - 1.0;
            fd_check(&problem, &theta, &log_beta, log_eta);
        }
    }

    #[test]
    fn no_disc_gradient_matches_fd() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(23);
        let problem =
            random_problem(DiscrepancyType::NoDiscrepancy, true, true, LambdaZ::Auto, 300);
        let theta = [rng.random::<f64>() - 0.5, rng.random::<f64>() * 2.0 - 1.0];
        let (_, grad) = value_and_grad(&problem, &theta, None, None).unwrap();
        assert_eq!(grad.len(), 2);
        for i in 0..2 {
            let h = 1e-5;
            let mut tp = theta;
            let mut tm = theta;
            tp[i] += h;
            tm[i] -= h;
            let fd = (profile_loglik(&problem, &tp, None).unwrap().loglik
                - profile_loglik(&problem, &tm, None).unwrap().loglik)
                / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * fd.abs().max(grad[i].abs()).max(1e-8),
                "component {i}: {} vs {}",
                grad[i],
                fd
            );
        }
    }
}
