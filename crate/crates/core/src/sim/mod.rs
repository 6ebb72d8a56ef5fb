//! Simulators and priors: pure, seedable stochastic maps `(theta, xi, rng) -> y`
//! plus prior samplers/log-densities and the metadata the rest of the
//! pipeline needs (dims, design bounds, prior moments, support).

mod gauss;
mod linear;
mod sir;
mod two_moons;

pub use gauss::GaussOracle;
pub use linear::LinearModel;
pub use sir::{SirGrid, SirModel, SirNoise};
pub use two_moons::TwoMoons;

use rand::RngCore;
use rand_distr::Distribution;

/// Standard normal draw from a dynamic generator.
pub(crate) fn draw_std_normal(rng: &mut dyn RngCore) -> f64 {
    rand_distr::StandardNormal.sample(rng)
}

/// Support of one theta coordinate, used by MCMC to pick an unconstrained
/// parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSupport {
    Real,
    /// Strictly positive; sampled in log space with a Jacobian correction.
    Positive,
}

/// How a training round obtains outcomes for pool members.
pub enum RoundSource {
    /// Call `simulate` directly per outcome.
    Direct,
    /// Read interpolated values from a pre-simulated grid (index-aligned
    /// with the theta pool the round was prepared for).
    Grid(SirGrid),
}

impl RoundSource {
    /// Outcome for pool member `idx` (whose parameters are `theta`) at `xi`.
    pub fn outcome(
        &self,
        sim: &dyn Simulator,
        idx: usize,
        theta: &[f64],
        xi: &[f64],
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        match self {
            RoundSource::Direct => sim.simulate(theta, xi, rng),
            RoundSource::Grid(grid) => vec![grid.observe(idx, xi[0], rng)],
        }
    }
}

/// A stochastic simulator with an explicit prior.
///
/// `simulate` must be deterministic given `(theta, xi)` and the generator
/// state, and must return finite values.
pub trait Simulator: Send + Sync {
    fn name(&self) -> &'static str;
    fn theta_dim(&self) -> usize;
    fn xi_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    /// Per-coordinate design bounds [alpha, beta].
    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn prior_sample(&self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn prior_log_density(&self, theta: &[f64]) -> f64;
    /// Analytic prior mean and standard deviation per coordinate.
    fn prior_moments(&self) -> (Vec<f64>, Vec<f64>);
    fn theta_support(&self) -> Vec<ParamSupport>;
    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;

    /// Amortize per-round work over a theta pool. Models whose trajectories
    /// dominate the step cost pre-simulate the pool on a grid here.
    fn prepare_round(&self, pool: &crate::ad::Tensor, seed: u64, round: u64) -> RoundSource {
        let _ = (pool, seed, round);
        RoundSource::Direct
    }
}

pub(crate) fn assert_design_in_bounds(name: &str, xi: &[f64], lo: &[f64], hi: &[f64]) {
    for (c, &x) in xi.iter().enumerate() {
        debug_assert!(
            x >= lo[c] - 1e-9 && x <= hi[c] + 1e-9,
            "{name}: design coordinate {c} = {x} outside [{}, {}]",
            lo[c],
            hi[c]
        );
    }
}
