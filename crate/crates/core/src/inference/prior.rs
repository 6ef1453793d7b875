//! Jointly robust prior for the inverse range and nugget parameters.
//!
//! `pi(beta, eta) \propto (sum_l C_l beta_l + eta)^a exp(-b (sum_l C_l beta_l + eta))`
//! with defaults `a = 1/2 - p`, `b = 1` and `C_l = n^{-1/p} L_l` for design
//! size n, input dimension p and design column range L_l. The same form with
//! `eta = 0` serves GP components without a nugget.

use crate::error::{CalibError, Result};

#[derive(Debug, Clone)]
pub struct JrPrior {
    pub a: f64,
    pub b: f64,
    pub c: Vec<f64>,
}

impl JrPrior {
    pub fn new(a: f64, b: f64, c: Vec<f64>) -> Result<Self> {
        if c.is_empty() || c.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CalibError::invalid("prior scale factors must be positive"));
        }
        if !(a.is_finite() && b.is_finite() && b > 0.0) {
            return Err(CalibError::invalid("prior parameters a, b must be finite with b > 0"));
        }
        Ok(JrPrior { a, b, c })
    }

    /// Defaults for a design with `n` rows, `p` input dimensions and column
    /// ranges `domain_lengths`.
    pub fn default_for(n: usize, domain_lengths: &[f64]) -> Result<Self> {
        let p = domain_lengths.len();
        if n == 0 || p == 0 {
            return Err(CalibError::invalid("prior defaults need n >= 1 and p >= 1"));
        }
        let a = 0.5 - p as f64;
        let scale = (n as f64).powf(-1.0 / p as f64);
        let c = domain_lengths
            .iter()
            .map(|len| {
                let len = if len.is_finite() && *len > 0.0 { *len } else { 1.0 };
                scale * len
            })
            .collect();
        JrPrior::new(a, 1.0, c)
    }

    /// Log prior density up to a constant; `eta = 0` is allowed as long as
    /// some beta is positive.
    pub fn log_density(&self, beta: &[f64], eta: f64) -> f64 {
        debug_assert_eq!(beta.len(), self.c.len());
        let t: f64 = beta.iter().zip(&self.c).map(|(b, c)| b * c).sum::<f64>() + eta;
        if !(t > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.a * t.ln() - self.b * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn defaults_follow_design_geometry() {
        let prior = JrPrior::default_for(25, &[2.0, 0.5]).unwrap();
        assert_relative_eq!(prior.a, -1.5);
        assert_relative_eq!(prior.b, 1.0);
        // n^{-1/2} = 0.2
        assert_relative_eq!(prior.c[0], 0.4, max_relative = 1e-14);
        assert_relative_eq!(prior.c[1], 0.1, max_relative = 1e-14);
    }

    #[test]
    fn log_density_matches_formula() {
        let prior = JrPrior::new(-0.5, 1.0, vec![2.0]).unwrap();
        let beta = [0.7];
        let t: f64 = 2.0 * 0.7 + 0.3;
        assert_relative_eq!(
            prior.log_density(&beta, 0.3),
            -0.5 * t.ln() - t,
            max_relative = 1e-14
        );
        assert_eq!(prior.log_density(&[0.0], 0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn density_integrates_to_a_mode_shape() {
        // the density t^a e^{-bt} is unimodal in t; the implied log density
        // must decrease when t moves away from the mode a/b for a > 0
        let prior = JrPrior::new(2.0, 1.0, vec![1.0]).unwrap();
        let at = |t: f64| prior.log_density(&[t], 0.0);
        assert!(at(2.0) > at(1.0));
        assert!(at(2.0) > at(3.5));
    }
}
