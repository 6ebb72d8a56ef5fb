//! Linear-Gaussian oracle: y = theta * xi + eps with known mutual
//! information, conditional entropy and conjugate posterior. The test anchor
//! for every bound and calibration check.

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use super::{assert_design_in_bounds, ParamSupport, Simulator};

#[derive(Debug, Clone)]
pub struct GaussOracle {
    pub sigma_theta: f64,
    pub sigma_eps: f64,
    /// Designs live in [-bound, bound].
    pub bound: f64,
}

impl Default for GaussOracle {
    fn default() -> Self {
        GaussOracle { sigma_theta: 1.0, sigma_eps: 1.0, bound: 10.0 }
    }
}

impl GaussOracle {
    pub fn new(sigma_theta: f64, sigma_eps: f64) -> Self {
        GaussOracle { sigma_theta, sigma_eps, bound: 10.0 }
    }

    /// MI(theta; y | xi) = 0.5 * log(1 + xi^2 sigma_theta^2 / sigma_eps^2).
    pub fn analytic_mi(&self, xi: f64) -> f64 {
        let r = xi * self.sigma_theta / self.sigma_eps;
        0.5 * (1.0 + r * r).ln()
    }

    /// Differential entropy H(y | theta, xi) = 0.5 * log(2 pi e sigma_eps^2).
    pub fn conditional_entropy(&self) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.sigma_eps * self.sigma_eps).ln()
    }

    /// Exact Gaussian likelihood log N(y; theta*xi, sigma_eps^2).
    pub fn log_likelihood(&self, y: f64, theta: f64, xi: f64) -> f64 {
        let z = (y - theta * xi) / self.sigma_eps;
        -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - self.sigma_eps.ln()
    }

    /// Conjugate posterior mean/variance of theta after observing
    /// `(xi_i, y_i)` pairs.
    pub fn conjugate_posterior(&self, history: &[(f64, f64)]) -> (f64, f64) {
        let se2 = self.sigma_eps * self.sigma_eps;
        let mut precision = 1.0 / (self.sigma_theta * self.sigma_theta);
        let mut weighted = 0.0;
        for &(xi, y) in history {
            precision += xi * xi / se2;
            weighted += xi * y / se2;
        }
        let var = 1.0 / precision;
        (weighted * var, var)
    }
}

impl Simulator for GaussOracle {
    fn name(&self) -> &'static str {
        "gauss-oracle"
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn xi_dim(&self) -> usize {
        1
    }

    fn y_dim(&self) -> usize {
        1
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.bound], vec![self.bound])
    }

    fn prior_sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![self.sigma_theta * super::draw_std_normal(rng)]
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        let s2 = self.sigma_theta * self.sigma_theta;
        -0.5 * theta[0] * theta[0] / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln()
    }

    fn prior_moments(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![self.sigma_theta])
    }

    fn theta_support(&self) -> Vec<ParamSupport> {
        vec![ParamSupport::Real]
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let (lo, hi) = self.design_bounds();
        assert_design_in_bounds("gauss-oracle", xi, &lo, &hi);
        let eps: f64 = StandardNormal.sample(rng);
        vec![theta[0] * xi[0] + self.sigma_eps * eps]
    }
}
