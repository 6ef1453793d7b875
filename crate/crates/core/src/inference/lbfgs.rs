//! Minimal L-BFGS with Armijo backtracking.
//!
//! The objective callback returns `None` for infeasible points (out of
//! bounds, failed factorization); the line search treats those like an
//! insufficient-decrease step and shrinks. Good enough for the smooth,
//! low-dimensional likelihood surfaces in this crate.

const MEMORY: usize = 8;
const ARMIJO_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MIN_STEP: f64 = 1e-16;
const GRAD_TOL: f64 = 1e-6;
const F_TOL: f64 = 1e-11;

pub(crate) struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub(crate) fn minimize<F>(
    mut fg: F,
    x0: &[f64],
    max_iterations: usize,
) -> Result<LbfgsOutcome, String>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = fg(&x).ok_or_else(|| "objective undefined at the start point".to_string())?;
    if !f.is_finite() {
        return Err("objective not finite at the start point".to_string());
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut small_change_streak = 0;

    for it in 0..max_iterations {
        iterations = it + 1;
        let gnorm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gnorm <= GRAD_TOL {
            converged = true;
            break;
        }

        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let k = s_hist.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let a = rho_hist[i] * dot(&s_hist[i], &d);
            alpha[i] = a;
            axpy(-a, &y_hist[i], &mut d);
        }
        if k > 0 {
            let last = k - 1;
            let sy = 1.0 / rho_hist[last];
            let yy = dot(&y_hist[last], &y_hist[last]);
            if yy > 0.0 {
                let scale = sy / yy;
                for v in d.iter_mut() {
                    *v *= scale;
                }
            }
        }
        for i in 0..k {
            let b = rho_hist[i] * dot(&y_hist[i], &d);
            axpy(alpha[i] - b, &s_hist[i], &mut d);
        }

        let mut slope = dot(&g, &d);
        if slope >= 0.0 {
            // fall back to steepest descent when curvature info went stale
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }

        // weak-Wolfe line search: bisection bracketing on the Armijo and
        // curvature conditions. The curvature condition keeps s'y positive,
        // which the memory update needs; without it the history goes stale
        // in curved valleys and progress crawls.
        let mut t = 1.0f64;
        let mut t_lo = 0.0f64;
        let mut t_hi = f64::INFINITY;
        let mut accepted: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        let mut armijo_only: Option<(Vec<f64>, f64, Vec<f64>)> = None;
        for _ in 0..60 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            match fg(&xt) {
                Some((ft, gt)) if ft.is_finite() => {
                    if ft > f + ARMIJO_C1 * t * slope {
                        t_hi = t;
                    } else if dot(&gt, &d) < WOLFE_C2 * slope {
                        // sufficient decrease but the slope is still steep:
                        // the step is too short
                        t_lo = t;
                        armijo_only = Some((xt, ft, gt));
                    } else {
                        accepted = Some((xt, ft, gt));
                        break;
                    }
                }
                _ => t_hi = t,
            }
            t = if t_hi.is_finite() { 0.5 * (t_lo + t_hi) } else { 2.0 * t_lo };
            if !(t.is_finite() && t >= MIN_STEP) {
                break;
            }
        }
        let Some((x_new, f_new, g_new)) = accepted.or(armijo_only) else {
            // no acceptable step along this direction; call it converged if
            // the gradient is already small-ish, otherwise report stall
            converged = gnorm <= 1e-3;
            break;
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        let s_norm = dot(&s, &s).sqrt();
        let y_norm = dot(&yv, &yv).sqrt();
        if sy > 1e-10 * s_norm * y_norm {
            if s_hist.len() == MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
            rho_hist.push(1.0 / sy);
        }

        let df = (f - f_new).abs();
        x = x_new;
        g = g_new;
        let f_prev = f;
        f = f_new;
        if df <= F_TOL * (1.0 + f_prev.abs()) {
            small_change_streak += 1;
            if small_change_streak >= 2 {
                converged = true;
                break;
            }
        } else {
            small_change_streak = 0;
        }
    }

    Ok(LbfgsOutcome { x, f, iterations, converged })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let fg = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            Some((f, g))
        };
        let out = minimize(fg, &[-1.2, 1.0], 400).unwrap();
        assert!(out.converged, "did not converge in {} iterations", out.iterations);
        assert!((out.x[0] - 1.0).abs() < 1e-5, "x = {:?}", out.x);
        assert!((out.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn respects_infeasible_regions() {
        // quadratic with a forbidden half plane; the minimizer sits inside
        let fg = |x: &[f64]| {
            if x[0] > 2.0 {
                return None;
            }
            let f = (x[0] - 1.0).powi(2);
            Some((f, vec![2.0 * (x[0] - 1.0)]))
        };
        let out = minimize(fg, &[1.9, ], 100).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn errors_when_start_infeasible() {
        let fg = |_: &[f64]| -> Option<(f64, Vec<f64>)> { None };
        assert!(minimize(fg, &[0.0], 10).is_err());
    }
}
