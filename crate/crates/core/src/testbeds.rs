//! Reference simulators and data generators used in the examples and the
//! acceptance suite: a closed-form exponential decay model with real field
//! data, a two-substance chemical kinetics ODE, the cyclic Lorenz-96 system,
//! Latin hypercube designs, and a multi-source synthetic data generator.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{CalibError, Result};
use crate::kernels::{corr_matrix, KernelFamily, KernelSpec, RangeParams};
use crate::model::{Observations, SimulatorBinding};

/// Exponential decay model `5 exp(-theta x)`.
pub fn bayarri07(x: f64, theta: f64) -> f64 {
    5.0 * (-theta * x).exp()
}

/// Reality that generated the decay field data: `3.5 exp(-1.7 x) + 1.5`.
pub fn bayarri07_truth(x: f64) -> f64 {
    3.5 * (-1.7 * x).exp() + 1.5
}

pub const BAYARRI07_THETA_RANGE: (f64, f64) = (0.0, 50.0);

/// The decay-model field data: 10 inputs with 3 replicates each.
pub fn bayarri07_data() -> (DMatrix<f64>, Observations) {
    let inputs = [0.110, 0.432, 0.754, 1.077, 1.399, 1.721, 2.043, 2.366, 2.688, 3.010];
    let outputs = [
        [4.730, 4.720, 4.234],
        [3.177, 2.966, 3.653],
        [1.970, 2.267, 2.084],
        [2.079, 2.409, 2.371],
        [1.908, 1.665, 1.685],
        [1.773, 1.603, 1.922],
        [1.370, 1.661, 1.757],
        [1.868, 1.505, 1.638],
        [1.390, 1.275, 1.679],
        [1.461, 1.157, 1.530],
    ];
    let design = DMatrix::from_fn(10, 1, |i, _| inputs[i]);
    let obs = Observations::Replicates(DMatrix::from_fn(10, 3, |i, j| outputs[i][j]));
    (design, obs)
}

pub fn bayarri07_simulator() -> SimulatorBinding {
    SimulatorBinding::pointwise(|x, th| bayarri07(x[0], th[0]))
}

/// An autonomous ODE system integrated from `t = 0` where `initial_state`
/// applies. `rhs(t, state, params)` returns the state derivative.
pub struct OdeSystem {
    pub dim: usize,
    pub rhs: Box<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    pub initial_state: Vec<f64>,
    /// Requested output times, ascending and nonnegative.
    pub times: Vec<f64>,
}

/// Classical fourth-order Runge-Kutta over the system's time grid. Each
/// interval between requested times is subdivided so no internal step
/// exceeds `step`. Returns one state row per requested time.
pub fn rk4_solve(system: &OdeSystem, params: &[f64], step: f64) -> Result<Vec<Vec<f64>>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(CalibError::invalid(format!("step must be positive, got {step}")));
    }
    let mut t = 0.0;
    let mut y = system.initial_state.clone();
    if y.len() != system.dim {
        return Err(CalibError::dim(format!(
            "initial state has {} entries for dimension {}",
            y.len(),
            system.dim
        )));
    }
    let mut out = Vec::with_capacity(system.times.len());
    let mut k2 = vec![0.0; system.dim];
    let mut k3 = vec![0.0; system.dim];
    let mut stage = vec![0.0; system.dim];
    for &target in &system.times {
        if !(target.is_finite() && target >= t - 1e-12) {
            return Err(CalibError::invalid(
                "output times must be finite, ascending and nonnegative",
            ));
        }
        if target > t {
            let n_steps = ((target - t) / step).ceil().max(1.0) as usize;
            let h = (target - t) / n_steps as f64;
            for _ in 0..n_steps {
                let k1 = (system.rhs)(t, &y, params);
                for i in 0..system.dim {
                    stage[i] = y[i] + 0.5 * h * k1[i];
                }
                k2.copy_from_slice(&(system.rhs)(t + 0.5 * h, &stage, params));
                for i in 0..system.dim {
                    stage[i] = y[i] + 0.5 * h * k2[i];
                }
                k3.copy_from_slice(&(system.rhs)(t + 0.5 * h, &stage, params));
                for i in 0..system.dim {
                    stage[i] = y[i] + h * k3[i];
                }
                let k4 = (system.rhs)(t + h, &stage, params);
                for i in 0..system.dim {
                    y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                t += h;
            }
            t = target;
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CalibError::Simulator(format!(
                "trajectory became non-finite at t = {t}"
            )));
        }
        out.push(y.clone());
    }
    Ok(out)
}

pub const BOX_THETA_RANGE: [(f64, f64); 2] = [(0.5, 1.5), (0.5, 1.5)];

/// Two-substance kinetics: `dM1 = -k1 M1`, `dM2 = k1 M1 - k2 M2` with
/// `k_i = 10^{theta_i - 3}`, started from `(M1, M2) = (100, 0)`.
pub fn box_system(times: Vec<f64>) -> OdeSystem {
    OdeSystem {
        dim: 2,
        rhs: Box::new(|_t, y, th| {
            let k1 = 10f64.powf(th[0] - 3.0);
            let k2 = 10f64.powf(th[1] - 3.0);
            vec![-k1 * y[0], k1 * y[0] - k2 * y[1]]
        }),
        initial_state: vec![100.0, 0.0],
        times,
    }
}

/// Second-substance concentration at the requested times, by RK4 with unit
/// internal step. Times may come in any order; the trajectory is integrated
/// once over the sorted sequence and read back per request.
pub fn box_model(times: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != 2 {
        return Err(CalibError::dim(format!("box model takes 2 parameters, got {}", theta.len())));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| times[i]).collect();
    let system = box_system(sorted);
    let traj = rk4_solve(&system, theta, 1.0)?;
    let mut out = vec![0.0; times.len()];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = traj[pos][1];
    }
    Ok(out)
}

/// Closed form of the second substance:
/// `M2(t) = 100 k1 (e^{-k1 t} - e^{-k2 t}) / (k2 - k1)`, with the resonant
/// `k1 = k2` limit `100 k1 t e^{-k1 t}`.
pub fn box_model_analytic(t: f64, theta: &[f64]) -> f64 {
    let k1 = 10f64.powf(theta[0] - 3.0);
    let k2 = 10f64.powf(theta[1] - 3.0);
    if (k2 - k1).abs() < 1e-12 * k1.max(k2) {
        100.0 * k1 * t * (-k1 * t).exp()
    } else {
        100.0 * k1 * ((-k1 * t).exp() - (-k2 * t).exp()) / (k2 - k1)
    }
}

/// The kinetics field data: 6 measurement times with 2 replicates each.
pub fn box_data() -> (DMatrix<f64>, Observations) {
    let times = [10.0, 20.0, 40.0, 80.0, 160.0, 320.0];
    let rep1 = [19.2, 14.0, 14.4, 24.0, 42.3, 30.8];
    let rep2 = [42.1, 40.5, 40.7, 46.4, 27.1, 22.3];
    let design = DMatrix::from_fn(6, 1, |i, _| times[i]);
    let obs = Observations::Replicates(DMatrix::from_fn(6, 2, |i, j| {
        if j == 0 {
            rep1[i]
        } else {
            rep2[i]
        }
    }));
    (design, obs)
}

/// Kinetics simulator solving the ODE once per parameter set over the whole
/// design column of times.
pub fn box_simulator() -> SimulatorBinding {
    SimulatorBinding::full_design(|design, theta| {
        let times: Vec<f64> = design.column(0).iter().cloned().collect();
        Ok(DVector::from_vec(box_model(&times, theta)?))
    })
}

/// Cyclic Lorenz-96 right-hand side with scalar force:
/// `dx_j = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + force`, indices mod k.
pub fn lorenz96_rhs(state: &[f64], force: f64) -> Vec<f64> {
    let k = state.len();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let jp1 = (j + 1) % k;
        let jm1 = (j + k - 1) % k;
        let jm2 = (j + k - 2) % k;
        out.push((state[jp1] - state[jm2]) * state[jm1] - state[j] + force);
    }
    out
}

pub fn lorenz96_system(k: usize, x0: Vec<f64>, times: Vec<f64>) -> OdeSystem {
    OdeSystem {
        dim: k,
        rhs: Box::new(|_t, y, th| lorenz96_rhs(y, th[0])),
        initial_state: x0,
        times,
    }
}

/// Initial state drawn as `N(0, W)` with `W` Wishart-distributed with `k`
/// degrees of freedom and identity scale: `x0 = Z u` for a standard normal
/// `k x k` matrix `Z` and standard normal vector `u`.
pub fn lorenz96_initial_state<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let z = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    (z * u).iter().cloned().collect()
}

/// RK4 states at `n_times` points spaced `h` apart (one row per time).
pub fn lorenz96_simulate(
    k: usize,
    theta: f64,
    x0: &[f64],
    n_times: usize,
    h: f64,
) -> Result<DMatrix<f64>> {
    if x0.len() != k {
        return Err(CalibError::dim(format!("x0 has {} entries for k = {k}", x0.len())));
    }
    let times: Vec<f64> = (1..=n_times).map(|i| i as f64 * h).collect();
    let system = lorenz96_system(k, x0.to_vec(), times);
    let traj = rk4_solve(&system, &[theta], h)?;
    Ok(DMatrix::from_fn(n_times, k, |i, j| traj[i][j]))
}

/// A synthetic Lorenz-96 calibration instance: true force 8, 40 states,
/// 40 time points spaced 0.05, unit observation noise, and 5% of the states
/// (2 per time point) observed. Scenario 2 adds the structural bias
/// `2 t sin(2 pi j / k)` to the observations.
pub struct Lorenz96Scenario {
    /// Observed coordinates, one row per observation: `(t, j)` with state
    /// index `j` in `1..=k`.
    pub design: DMatrix<f64>,
    pub observations: DVector<f64>,
    /// Full simulated reality (n_times x k), noise-free and bias-free.
    pub reality: DMatrix<f64>,
    pub x0: Vec<f64>,
    pub truth_theta: f64,
    pub k: usize,
    pub n_times: usize,
    pub h: f64,
}

pub const LORENZ96_THETA_RANGE: (f64, f64) = (-20.0, 20.0);

pub fn lorenz96_scenario(scenario: u8, seed: u64) -> Result<Lorenz96Scenario> {
    if scenario != 1 && scenario != 2 {
        return Err(CalibError::invalid(format!("scenario must be 1 or 2, got {scenario}")));
    }
    let (k, n_times, h, truth) = (40usize, 40usize, 0.05, 8.0);
    let per_time = (k as f64 * 0.05).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x0 = lorenz96_initial_state(&mut rng, k);
    let reality = lorenz96_simulate(k, truth, &x0, n_times, h)?;
    let n_obs = n_times * per_time;
    let mut design = DMatrix::<f64>::zeros(n_obs, 2);
    let mut obs = DVector::<f64>::zeros(n_obs);
    let mut row = 0;
    let mut indices: Vec<usize> = (0..k).collect();
    for i in 0..n_times {
        let t = (i + 1) as f64 * h;
        indices.shuffle(&mut rng);
        let mut chosen = indices[..per_time].to_vec();
        chosen.sort_unstable();
        for &j in &chosen {
            let bias = if scenario == 2 {
                2.0 * t * (2.0 * std::f64::consts::PI * (j + 1) as f64 / k as f64).sin()
            } else {
                0.0
            };
            design[(row, 0)] = t;
            design[(row, 1)] = (j + 1) as f64;
            obs[row] = reality[(i, j)] + bias + rng.sample::<f64, _>(StandardNormal);
            row += 1;
        }
    }
    Ok(Lorenz96Scenario {
        design,
        observations: obs,
        reality,
        x0,
        truth_theta: truth,
        k,
        n_times,
        h,
    })
}

/// Simulator for [`lorenz96_scenario`] designs: solves the system once per
/// parameter set and reads off the `(t, j)` entries requested by the design.
pub fn lorenz96_simulator(x0: Vec<f64>, k: usize, n_times: usize, h: f64) -> SimulatorBinding {
    SimulatorBinding::full_design(move |design, theta| {
        let states = lorenz96_simulate(k, theta[0], &x0, n_times, h)?;
        let mut out = DVector::<f64>::zeros(design.nrows());
        for r in 0..design.nrows() {
            let ti = (design[(r, 0)] / h).round() as usize;
            let j = design[(r, 1)].round() as usize;
            if ti < 1 || ti > n_times || j < 1 || j > k {
                return Err(CalibError::Simulator(format!(
                    "design row {r} = ({}, {}) is outside the simulated grid",
                    design[(r, 0)],
                    design[(r, 1)]
                )));
            }
            out[r] = states[(ti - 1, j - 1)];
        }
        Ok(out)
    })
}

/// One random Latin hypercube in the unit cube: each column visits every one
/// of the `n` strata exactly once, jittered uniformly within each cell.
pub fn lhs_design<R: Rng>(rng: &mut R, n: usize, p: usize) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(n, p);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..p {
        perm.shuffle(rng);
        for i in 0..n {
            out[(i, j)] = (perm[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

/// Best of `candidates` random Latin hypercubes by the maximin criterion
/// (largest minimum pairwise distance).
pub fn maximin_lhs<R: Rng>(rng: &mut R, n: usize, p: usize, candidates: usize) -> DMatrix<f64> {
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..candidates.max(1) {
        let cand = lhs_design(rng, n, p);
        let mut min_d2 = f64::INFINITY;
        for a in 0..n {
            for b in (a + 1)..n {
                let mut d2 = 0.0;
                for j in 0..p {
                    let d = cand[(a, j)] - cand[(b, j)];
                    d2 += d * d;
                }
                min_d2 = min_d2.min(d2);
            }
        }
        if best.as_ref().map_or(true, |(m, _)| min_d2 > *m) {
            best = Some((min_d2, cand));
        }
    }
    best.expect("at least one candidate").1
}

/// Synthetic multi-source data: `y_l(x) = sin(pi x) + delta(x) + delta_l(x)
/// + eps_l(x)` on `n` equally spaced points in [0, 1].
pub struct MultiSourceSim {
    pub x: DVector<f64>,
    /// One observation vector per source.
    pub observations: Vec<DVector<f64>>,
    /// The estimand `sin(pi x) + delta(x)`.
    pub reality: DVector<f64>,
    pub shared_delta: DVector<f64>,
    pub biases: Vec<DVector<f64>>,
    pub theta_truth: f64,
    pub noise_sd: f64,
}

/// Computer model shared by all sources: `f_l(x, theta) = sin(theta x)`.
pub fn multisource_model(x: f64, theta: f64) -> f64 {
    (theta * x).sin()
}

pub fn multisource_simulator() -> SimulatorBinding {
    SimulatorBinding::pointwise(|x, th| multisource_model(x[0], th[0]))
}

/// Draw the shared discrepancy (sd `sigma_shared`, range 1/30), per-source
/// biases (variances evenly spaced on [0.5, 1], range 1/10) and Gaussian
/// noise (sd 0.05), all from Matern (roughness 2.5) GPs on the grid.
pub fn multisource_simulate(
    n: usize,
    k: usize,
    sigma_shared: f64,
    seed: u64,
) -> Result<MultiSourceSim> {
    if n < 2 || k == 0 {
        return Err(CalibError::invalid("need n >= 2 grid points and k >= 1 sources"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x = DVector::from_fn(n, |i, _| i as f64 / (n - 1) as f64);
    let design = DMatrix::from_fn(n, 1, |i, _| x[i]);
    let spec = KernelSpec::uniform(KernelFamily::Matern52, 1)?;
    let gp_draw = |rng: &mut ChaCha20Rng, gamma: f64, sd: f64, design: &DMatrix<f64>| {
        let corr = corr_matrix(design, &spec, &RangeParams::new(vec![gamma])?)?;
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Ok::<DVector<f64>, CalibError>(corr.chol().l() * z * sd)
    };
    let theta_truth = std::f64::consts::PI;
    let shared_delta = gp_draw(&mut rng, 1.0 / 30.0, sigma_shared, &design)?;
    let reality = DVector::from_fn(n, |i, _| multisource_model(x[i], theta_truth)) + &shared_delta;
    let noise_sd = 0.05;
    let mut observations = Vec::with_capacity(k);
    let mut biases = Vec::with_capacity(k);
    for l in 0..k {
        let var_l = if k == 1 { 0.5 } else { 0.5 + 0.5 * l as f64 / (k - 1) as f64 };
        let bias = gp_draw(&mut rng, 1.0 / 10.0, var_l.sqrt(), &design)?;
        let eps = DVector::from_fn(n, |_, _| noise_sd * rng.sample::<f64, _>(StandardNormal));
        observations.push(&reality + &bias + eps);
        biases.push(bias);
    }
    Ok(MultiSourceSim {
        x,
        observations,
        reality,
        shared_delta,
        biases,
        theta_truth,
        noise_sd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn decay_model_values_and_data_shapes() {
        assert_eq!(bayarri07(0.0, 31.2), 5.0);
        // truth minus model at the true rate leaves the constant offset term
        for x in [0.1, 0.7, 2.3] {
            let diff = bayarri07_truth(x) - bayarri07(x, 1.7);
            assert_relative_eq!(diff, 1.5 - 1.5 * (-1.7f64 * x).exp(), epsilon = 1e-12);
        }
        let (design, obs) = bayarri07_data();
        assert_eq!(design.nrows(), 10);
        match obs {
            Observations::Replicates(m) => {
                assert_eq!((m.nrows(), m.ncols()), (10, 3));
                assert_eq!(m[(0, 0)], 4.730);
                assert_eq!(m[(0, 2)], 4.234);
                assert_eq!(m[(9, 2)], 1.530);
            }
            _ => panic!("expected replicate matrix"),
        }
        assert_eq!(design[(9, 0)], 3.010);
    }

    #[test]
    fn rk4_single_step_matches_exponential() {
        let system = OdeSystem {
            dim: 1,
            rhs: Box::new(|_, y, _| vec![-y[0]]),
            initial_state: vec![1.0],
            times: vec![0.05],
        };
        let traj = rk4_solve(&system, &[], 0.05).unwrap();
        assert!((traj[0][0] - (-0.05f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_is_fourth_order_on_the_exponential() {
        let err = |h: f64| {
            let system = OdeSystem {
                dim: 1,
                rhs: Box::new(|_, y, _| vec![-y[0]]),
                initial_state: vec![1.0],
                times: vec![2.0],
            };
            (rk4_solve(&system, &[], h).unwrap()[0][0] - (-2.0f64).exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!(ratio > 12.0 && ratio < 20.0, "convergence ratio {ratio}");
    }

    #[test]
    fn rk4_keeps_zero_rhs_constant_and_rejects_blowup() {
        let system = OdeSystem {
            dim: 2,
            rhs: Box::new(|_, _, _| vec![0.0, 0.0]),
            initial_state: vec![3.0, -1.0],
            times: vec![1.0, 2.0, 5.0],
        };
        let traj = rk4_solve(&system, &[], 0.5).unwrap();
        assert_eq!(traj[2], vec![3.0, -1.0]);

        let explosive = OdeSystem {
            dim: 1,
            rhs: Box::new(|_, y, _| vec![y[0] * y[0]]),
            initial_state: vec![1.0],
            times: vec![5.0],
        };
        assert!(rk4_solve(&explosive, &[], 0.01).is_err());
    }

    #[test]
    fn box_rk4_matches_the_closed_form() {
        let times = [10.0, 20.0, 40.0, 80.0, 160.0, 320.0];
        for theta in [[0.5, 1.5], [1.0, 1.0], [1.5, 0.5], [1.2, 0.7]] {
            let m2 = box_model(&times, &theta).unwrap();
            for (i, &t) in times.iter().enumerate() {
                let exact = box_model_analytic(t, &theta);
                assert!(
                    (m2[i] - exact).abs() < 1e-6,
                    "theta {theta:?} t {t}: {} vs {exact}",
                    m2[i]
                );
            }
        }
        assert_eq!(box_model_analytic(0.0, &[0.9, 1.3]), 0.0);
    }

    #[test]
    fn box_data_shapes() {
        let (design, obs) = box_data();
        assert_eq!(design.column(0).iter().cloned().collect::<Vec<_>>(), vec![
            10.0, 20.0, 40.0, 80.0, 160.0, 320.0
        ]);
        match obs {
            Observations::Replicates(m) => {
                assert_eq!(m[(0, 0)], 19.2);
                assert_eq!(m[(1, 0)], 14.0);
                assert_eq!(m[(0, 1)], 42.1);
                assert_eq!(m[(5, 1)], 22.3);
            }
            _ => panic!("expected replicate matrix"),
        }
    }

    #[test]
    fn lorenz96_equilibrium_is_constant() {
        let k = 7;
        let force = 2.5;
        let x0 = vec![force; k];
        let states = lorenz96_simulate(k, force, &x0, 10, 0.05).unwrap();
        for v in states.iter() {
            assert_relative_eq!(*v, force, epsilon = 1e-12);
        }
    }

    #[test]
    fn lorenz96_rhs_matches_modular_oracle_and_rotates() {
        let k = 9;
        let state: Vec<f64> = (0..k).map(|j| (j as f64 * 0.7).sin() + 0.3).collect();
        let force = 1.3;
        let rhs = lorenz96_rhs(&state, force);
        let md = |i: i64| -> f64 { state[(i.rem_euclid(k as i64)) as usize] };
        for j in 0..k as i64 {
            let oracle = (md(j + 1) - md(j - 2)) * md(j - 1) - md(j) + force;
            assert_relative_eq!(rhs[j as usize], oracle, epsilon = 1e-14);
        }
        // rotating the state rotates the derivative identically
        let mut rotated = state.clone();
        rotated.rotate_left(3);
        let rhs_rot = lorenz96_rhs(&rotated, force);
        let mut expected = rhs.clone();
        expected.rotate_left(3);
        for (a, b) in rhs_rot.iter().zip(&expected) {
            assert_relative_eq!(*a, *b, epsilon = 1e-14);
        }
    }

    #[test]
    fn lorenz96_scenario_masks_two_states_per_time() {
        let sc = lorenz96_scenario(1, 9).unwrap();
        assert_eq!(sc.design.nrows(), 80);
        assert_eq!(sc.observations.len(), 80);
        for i in 0..40 {
            let t = (i + 1) as f64 * 0.05;
            let rows: Vec<usize> =
                (0..80).filter(|r| (sc.design[(*r, 0)] - t).abs() < 1e-12).collect();
            assert_eq!(rows.len(), 2, "time {t}");
            assert_ne!(sc.design[(rows[0], 1)], sc.design[(rows[1], 1)]);
        }
        // determinism
        let sc2 = lorenz96_scenario(1, 9).unwrap();
        assert_eq!(sc.observations, sc2.observations);
        // scenario 2 differs only in the added structural bias
        let sc_bias = lorenz96_scenario(2, 9).unwrap();
        assert_eq!(sc.design, sc_bias.design);
        let r = 57;
        let (t, j) = (sc.design[(r, 0)], sc.design[(r, 1)]);
        let bias = 2.0 * t * (2.0 * std::f64::consts::PI * j / 40.0).sin();
        assert_relative_eq!(sc_bias.observations[r] - sc.observations[r], bias, epsilon = 1e-12);
    }

    #[test]
    fn lorenz96_simulator_reads_the_grid() {
        let sc = lorenz96_scenario(1, 3).unwrap();
        let sim = lorenz96_simulator(sc.x0.clone(), sc.k, sc.n_times, sc.h);
        let out = sim.eval(&sc.design, &[sc.truth_theta]).unwrap();
        for r in 0..sc.design.nrows() {
            let ti = (sc.design[(r, 0)] / sc.h).round() as usize - 1;
            let j = sc.design[(r, 1)] as usize - 1;
            assert_eq!(out[r], sc.reality[(ti, j)]);
        }
    }

    #[test]
    fn lhs_hits_every_stratum_once() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let d = lhs_design(&mut rng, 12, 3);
        for j in 0..3 {
            let mut strata: Vec<usize> =
                (0..12).map(|i| (d[(i, j)] * 12.0).floor() as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, (0..12).collect::<Vec<_>>());
        }
        let mut rng2 = ChaCha20Rng::seed_from_u64(22);
        let two = lhs_design(&mut rng2, 2, 1);
        assert!((two[(0, 0)] < 0.5) != (two[(1, 0)] < 0.5));
    }

    #[test]
    fn maximin_beats_a_single_random_hypercube_on_most_seeds() {
        let min_dist = |m: &DMatrix<f64>| {
            let mut best = f64::INFINITY;
            for a in 0..m.nrows() {
                for b in (a + 1)..m.nrows() {
                    let d: f64 =
                        (0..m.ncols()).map(|j| (m[(a, j)] - m[(b, j)]).powi(2)).sum();
                    best = best.min(d);
                }
            }
            best
        };
        let mut wins = 0;
        for seed in 0..20u64 {
            let mut r1 = ChaCha20Rng::seed_from_u64(seed);
            let mut r2 = ChaCha20Rng::seed_from_u64(1000 + seed);
            let best = maximin_lhs(&mut r1, 10, 2, 200);
            let single = lhs_design(&mut r2, 10, 2);
            if min_dist(&best) >= min_dist(&single) {
                wins += 1;
            }
        }
        assert!(wins >= 19, "maximin won only {wins}/20");
    }

    #[test]
    fn multisource_fields_are_consistent() {
        let sim = multisource_simulate(100, 5, 0.2, 4).unwrap();
        assert_eq!(sim.observations.len(), 5);
        for y in &sim.observations {
            assert_eq!(y.len(), 100);
        }
        // reality is the model at the true parameter plus the shared term
        for i in [0usize, 37, 99] {
            let expect = multisource_model(sim.x[i], sim.theta_truth) + sim.shared_delta[i];
            assert_relative_eq!(sim.reality[i], expect, epsilon = 1e-12);
        }
        assert_eq!(sim.x[0], 0.0);
        assert_eq!(sim.x[99], 1.0);
        // bit reproducible
        let sim2 = multisource_simulate(100, 5, 0.2, 4).unwrap();
        assert_eq!(sim.observations[3], sim2.observations[3]);
    }

    #[test]
    fn shared_delta_variance_matches_its_scale() {
        // average squared value over independent draws estimates sigma^2
        let sigma = 0.2;
        let mut acc = 0.0;
        let mut count = 0;
        for seed in 0..30u64 {
            let sim = multisource_simulate(50, 1, sigma, 100 + seed).unwrap();
            acc += sim.shared_delta.iter().map(|v| v * v).sum::<f64>();
            count += sim.shared_delta.len();
        }
        let est = acc / count as f64;
        assert!(
            (est - sigma * sigma).abs() < 0.3 * sigma * sigma,
            "estimated variance {est} vs {}",
            sigma * sigma
        );
    }
}
