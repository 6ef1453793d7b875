//! Scratch diagnostic for the multi-source shared-discrepancy chain.

use bayescal::inference::McmcConfig;
use bayescal::model::{DiscrepancyType, Observations};
use bayescal::multisource::{ms_mcmc, ms_predict, MultiSourceProblem, SourceSpec};
use bayescal::testbeds::{multisource_simulate, multisource_simulator};
use nalgebra::{DMatrix, DVector};

fn rmse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    ((a - b).norm_squared() / a.len() as f64).sqrt()
}

fn main() {
    for seed in [901u64, 902, 903] {
        let sim = multisource_simulate(100, 5, 0.2, seed).unwrap();
        let n = sim.x.len();
        let design = DMatrix::from_fn(n, 1, |i, _| sim.x[i]);
        let theta_range = vec![(0.0, 2.0 * std::f64::consts::PI)];
        for (label, n_samples, burn_in) in [("short", 2_500usize, 500usize), ("long", 10_000, 2_000)] {
            for shared in [DiscrepancyType::Gasp, DiscrepancyType::Sgasp] {
                let sources: Vec<SourceSpec> = sim
                    .observations
                    .iter()
                    .map(|y| SourceSpec {
                        design: design.clone(),
                        observations: Observations::Vector(y.clone()),
                        simulator: multisource_simulator(),
                        index_theta: vec![0],
                        discrepancy: DiscrepancyType::Gasp,
                        kernel: None,
                        trend: false,
                        output_weights: None,
                    })
                    .collect();
                let problem =
                    MultiSourceProblem::new(sources, theta_range.clone(), true, shared, None)
                        .unwrap();
                let config = McmcConfig {
                    n_samples,
                    burn_in,
                    thinning: 2,
                    seed: seed + if shared == DiscrepancyType::Sgasp { 2 } else { 1 },
                    ..McmcConfig::default()
                };
                let post = ms_mcmc(&problem, &config).unwrap();
                let pred = ms_predict(&problem, &post, &design).unwrap();
                let r = rmse(&pred.reality, &sim.reality);
                let nd = post.n_draws();
                let mean_theta = post.posterior_mean_theta()[0];
                let mean_sdel: f64 = post.sigma_delta_sq.iter().sum::<f64>() / nd as f64;
                let mean_lb: f64 = post.shared_log_beta.column(0).iter().sum::<f64>() / nd as f64;
                // quality of the shared-delta draws themselves at the grid
                let mut dhat = DVector::<f64>::zeros(n);
                for row in 0..nd {
                    for i in 0..n {
                        dhat[i] += post.delta[(row, i)];
                    }
                }
                dhat /= nd as f64;
                let d_err = rmse(&dhat, &sim.shared_delta);
                let d_zero = rmse(&DVector::zeros(n), &sim.shared_delta);
                println!(
                    "seed {seed} {label:>5} {shared:?}: reality rmse {r:.3}, theta {mean_theta:.3}, \
                     sigma_d^2 {mean_sdel:.3}, mean log_beta {mean_lb:.2} (beta {:.1}), \
                     delta err {d_err:.3} (zero baseline {d_zero:.3})",
                    mean_lb.exp()
                );
            }
        }
    }
}
