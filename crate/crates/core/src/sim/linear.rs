//! Noisy linear model: y = theta0 + theta1 * xi + eps + nu with standard
//! normal and Gamma(2, rate 2) noise, one measurement per design coordinate.

use rand::RngCore;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::{assert_design_in_bounds, ParamSupport, Simulator};

#[derive(Debug, Clone)]
pub struct LinearModel {
    /// Number of simultaneous measurements D (xi and y are D-vectors).
    pub dims: usize,
    /// Gamma noise, shape/rate convention (mean shape/rate, here 1).
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    /// Prior sd of both theta coordinates.
    pub prior_sd: f64,
    /// Symmetric design bound: xi in [-bound, bound]^D.
    pub bound: f64,
}

impl LinearModel {
    pub fn new(dims: usize) -> Self {
        LinearModel { dims, gamma_shape: 2.0, gamma_rate: 2.0, prior_sd: 3.0, bound: 10.0 }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    /// Noise-free response theta0 + theta1 * xi.
    pub fn mean_response(&self, theta: &[f64], xi: &[f64]) -> Vec<f64> {
        xi.iter().map(|&x| theta[0] + theta[1] * x).collect()
    }

    pub fn gamma_mean(&self) -> f64 {
        self.gamma_shape / self.gamma_rate
    }

    pub fn gamma_variance(&self) -> f64 {
        self.gamma_shape / (self.gamma_rate * self.gamma_rate)
    }
}

impl Simulator for LinearModel {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn xi_dim(&self) -> usize {
        self.dims
    }

    fn y_dim(&self) -> usize {
        self.dims
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![-self.bound; self.dims], vec![self.bound; self.dims])
    }

    fn prior_sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        (0..2).map(|_| self.prior_sd * super::draw_std_normal(rng)).collect()
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        let s2 = self.prior_sd * self.prior_sd;
        theta
            .iter()
            .map(|&t| -0.5 * t * t / s2 - 0.5 * (2.0 * std::f64::consts::PI * s2).ln())
            .sum()
    }

    fn prior_moments(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 2], vec![self.prior_sd; 2])
    }

    fn theta_support(&self) -> Vec<ParamSupport> {
        vec![ParamSupport::Real; 2]
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        assert_eq!(theta.len(), 2);
        assert_eq!(xi.len(), self.dims);
        let (lo, hi) = self.design_bounds();
        assert_design_in_bounds("linear", xi, &lo, &hi);
        let gamma = Gamma::new(self.gamma_shape, 1.0 / self.gamma_rate).expect("gamma params");
        self.mean_response(theta, xi)
            .into_iter()
            .map(|m| {
                let eps: f64 = StandardNormal.sample(rng);
                let nu: f64 = gamma.sample(rng);
                m + eps + nu
            })
            .collect()
    }
}
