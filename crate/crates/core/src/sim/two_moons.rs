//! Two-moons benchmark: a design-free task with a crescent-shaped
//! conditional and a bimodal posterior.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::{ParamSupport, Simulator};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Clone, Default)]
pub struct TwoMoons;

impl TwoMoons {
    /// Closed-form output for fixed crescent noise (a, r); the stochastic
    /// simulate draws a ~ U(-pi/2, pi/2), r ~ N(0.1, 0.01^2).
    pub fn mean_point(theta: &[f64], a: f64, r: f64) -> [f64; 2] {
        let p = [r * a.cos() + 0.25, r * a.sin()];
        [
            p[0] - (theta[0] + theta[1]).abs() * FRAC_1_SQRT_2,
            p[1] + (-theta[0] + theta[1]) * FRAC_1_SQRT_2,
        ]
    }
}

impl Simulator for TwoMoons {
    fn name(&self) -> &'static str {
        "two-moons"
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn xi_dim(&self) -> usize {
        0
    }

    fn y_dim(&self) -> usize {
        2
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![], vec![])
    }

    fn prior_sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        if theta.iter().all(|t| (-1.0..=1.0).contains(t)) {
            // Uniform on [-1,1]^2.
            -(4.0f64).ln()
        } else {
            f64::NEG_INFINITY
        }
    }

    fn prior_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let sd = (1.0f64 / 3.0).sqrt();
        (vec![0.0; 2], vec![sd; 2])
    }

    fn theta_support(&self) -> Vec<ParamSupport> {
        vec![ParamSupport::Real; 2]
    }

    fn simulate(&self, theta: &[f64], _xi: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let a: f64 = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let r = 0.1 + 0.01 * super::draw_std_normal(rng);
        TwoMoons::mean_point(theta, a, r).to_vec()
    }
}
