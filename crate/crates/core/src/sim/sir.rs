//! Stochastic SIR epidemic integrated with Euler-Maruyama on a fixed time
//! grid, with log-normal priors over the infection/recovery rates and a
//! measurement-time design.
//!
//! The dynamics are the chemical-Langevin form
//!   dS = -(b S I / N) dt - sqrt(b S I / N) dW1
//!   dI = (b S I / N - g I) dt + sqrt(b S I / N) dW1 - sqrt(g I) dW2
//! with R = N - S - I. States are clamped to stay in [0, N] with S + I <= N;
//! clamp events are counted and reported on the grid.
//!
//! Trajectories are expensive relative to a training step, so rounds
//! pre-simulate every theta in the pool on the grid once and training reads
//! interpolated infected counts in O(1).

use rand::RngCore;
use rand_distr::{Distribution, LogNormal, Poisson, StandardNormal};

use super::{assert_design_in_bounds, ParamSupport, Simulator};

/// Observation law for the infected count read-out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SirNoise {
    /// Continuous relaxation: y = I + sqrt(max(I, eps)) * z, clamped to [0, N].
    Gaussian,
    /// y = Poisson(I) truncated at the population size.
    Poisson,
}

#[derive(Debug, Clone)]
pub struct SirModel {
    pub population: f64,
    pub initial_infected: f64,
    /// Euler-Maruyama step.
    pub dt: f64,
    /// End of the design window; designs are measurement times in [0, tau_max].
    pub tau_max: f64,
    pub noise: SirNoise,
    /// Lognormal prior parameters (of the underlying normal) for beta, gamma.
    pub beta_prior: (f64, f64),
    pub gamma_prior: (f64, f64),
    /// Scales the diffusion terms; 0 gives the deterministic ODE limit.
    pub diffusion_scale: f64,
}

impl Default for SirModel {
    fn default() -> Self {
        SirModel {
            population: 500.0,
            initial_infected: 2.0,
            dt: 1e-2,
            tau_max: 100.0,
            noise: SirNoise::Gaussian,
            beta_prior: (0.50, 0.50),
            gamma_prior: (0.10, 0.50),
            diffusion_scale: 1.0,
        }
    }
}

/// Pre-simulated infected trajectories for a pool of theta samples.
#[derive(Debug, Clone)]
pub struct SirGrid {
    pub dt: f64,
    pub tau_max: f64,
    /// [sample][time index] infected counts, time index 0..=steps.
    pub infected: Vec<Vec<f64>>,
    /// Euler-Maruyama clamp events observed while building the grid.
    pub clamp_events: u64,
    pub noise: SirNoise,
    pub population: f64,
}

impl SirGrid {
    pub fn samples(&self) -> usize {
        self.infected.len()
    }

    /// Linear interpolation of the infected count at time `tau`.
    pub fn interpolate(&self, sample: usize, tau: f64) -> f64 {
        let traj = &self.infected[sample];
        let steps = traj.len() - 1;
        let pos = (tau / self.dt).clamp(0.0, steps as f64);
        let i0 = pos.floor() as usize;
        if i0 >= steps {
            return traj[steps];
        }
        let frac = pos - i0 as f64;
        traj[i0] * (1.0 - frac) + traj[i0 + 1] * frac
    }

    /// Noisy measurement for a pre-gridded sample at design time `xi`,
    /// under the grid's observation law.
    pub fn observe(&self, sample: usize, xi: f64, rng: &mut dyn RngCore) -> f64 {
        let tau = if (0.0..=self.tau_max).contains(&xi) {
            xi
        } else {
            eprintln!("sir: design {xi} outside [0, {}], clamping", self.tau_max);
            xi.clamp(0.0, self.tau_max)
        };
        let i_mean = self.interpolate(sample, tau);
        apply_noise(self.noise, self.population, i_mean, rng)
    }
}

fn apply_noise(noise: SirNoise, population: f64, i_mean: f64, rng: &mut dyn RngCore) -> f64 {
    match noise {
        SirNoise::Gaussian => {
            let z = super::draw_std_normal(rng);
            (i_mean + i_mean.max(1e-8).sqrt() * z).clamp(0.0, population)
        }
        SirNoise::Poisson => {
            let lambda = i_mean.max(1e-12);
            let draw = Poisson::new(lambda).expect("positive lambda").sample(rng);
            draw.min(population)
        }
    }
}

impl SirModel {
    /// Integrate one trajectory up to `tau_end`, returning infected counts at
    /// every grid point and the clamp-event count.
    fn integrate(&self, theta: &[f64], tau_end: f64, rng: &mut dyn RngCore) -> (Vec<f64>, u64) {
        let (beta, gamma) = (theta[0], theta[1]);
        assert!(beta >= 0.0 && gamma >= 0.0, "SIR rates must be non-negative");
        let n = self.population;
        let steps = (tau_end / self.dt).ceil() as usize;
        let sqrt_dt = self.dt.sqrt();
        let mut s = n - self.initial_infected;
        let mut i = self.initial_infected;
        let mut out = Vec::with_capacity(steps + 1);
        let mut clamps = 0u64;
        out.push(i);
        for _ in 0..steps {
            let inf_rate = (beta * s * i / n).max(0.0);
            let rec_rate = (gamma * i).max(0.0);
            let dw1 = self.diffusion_scale * sqrt_dt * super::draw_std_normal(rng);
            let dw2 = self.diffusion_scale * sqrt_dt * super::draw_std_normal(rng);
            let flow_si = inf_rate * self.dt + inf_rate.sqrt() * dw1;
            let flow_ir = rec_rate * self.dt + rec_rate.sqrt() * dw2;
            let mut s_new = s - flow_si;
            let mut i_new = i + flow_si - flow_ir;
            if s_new < 0.0 || i_new < 0.0 || s_new + i_new > n {
                clamps += 1;
                s_new = s_new.clamp(0.0, n);
                i_new = i_new.clamp(0.0, n - s_new);
            }
            s = s_new;
            i = i_new;
            out.push(i);
        }
        (out, clamps)
    }

    /// Pre-simulate the full grid for every theta in the pool.
    pub fn pregrid(&self, thetas: &[Vec<f64>], rngs: &mut [impl RngCore]) -> SirGrid {
        assert_eq!(thetas.len(), rngs.len(), "one stream per theta sample");
        let mut infected = Vec::with_capacity(thetas.len());
        let mut clamp_events = 0;
        for (theta, rng) in thetas.iter().zip(rngs.iter_mut()) {
            let (traj, clamps) = self.integrate(theta, self.tau_max, rng);
            debug_assert!(traj.iter().all(|v| v.is_finite()), "non-finite SIR state");
            infected.push(traj);
            clamp_events += clamps;
        }
        SirGrid {
            dt: self.dt,
            tau_max: self.tau_max,
            infected,
            clamp_events,
            noise: self.noise,
            population: self.population,
        }
    }

    /// Observation noise applied to an interpolated infected count.
    pub fn observe_noisy(&self, i_mean: f64, rng: &mut dyn RngCore) -> f64 {
        apply_noise(self.noise, self.population, i_mean, rng)
    }

    /// Measurement at design time `xi` for a pre-gridded sample.
    pub fn observe(&self, grid: &SirGrid, sample: usize, xi: f64, rng: &mut dyn RngCore) -> f64 {
        grid.observe(sample, xi, rng)
    }
}

impl Simulator for SirModel {
    fn name(&self) -> &'static str {
        "sir"
    }

    fn prepare_round(&self, pool: &crate::ad::Tensor, seed: u64, round: u64) -> super::RoundSource {
        use crate::rng::{module_stream, StreamId};
        let thetas: Vec<Vec<f64>> = (0..pool.rows())
            .map(|i| (0..pool.cols()).map(|c| pool.get2(i, c)).collect())
            .collect();
        let mut rngs: Vec<_> = (0..pool.rows())
            .map(|i| module_stream(seed, StreamId::Simulator, &[round, u64::MAX, i as u64]))
            .collect();
        super::RoundSource::Grid(self.pregrid(&thetas, &mut rngs))
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn xi_dim(&self) -> usize {
        1
    }

    fn y_dim(&self) -> usize {
        1
    }

    fn design_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0], vec![self.tau_max])
    }

    fn prior_sample(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let beta = LogNormal::new(self.beta_prior.0, self.beta_prior.1).unwrap().sample(rng);
        let gamma = LogNormal::new(self.gamma_prior.0, self.gamma_prior.1).unwrap().sample(rng);
        vec![beta, gamma]
    }

    fn prior_log_density(&self, theta: &[f64]) -> f64 {
        let lognorm_lpdf = |x: f64, mu: f64, sd: f64| -> f64 {
            if x <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let z = (x.ln() - mu) / sd;
            -0.5 * z * z - x.ln() - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        };
        lognorm_lpdf(theta[0], self.beta_prior.0, self.beta_prior.1)
            + lognorm_lpdf(theta[1], self.gamma_prior.0, self.gamma_prior.1)
    }

    fn prior_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let moments = |mu: f64, sd: f64| -> (f64, f64) {
            let mean = (mu + 0.5 * sd * sd).exp();
            let var = ((sd * sd).exp() - 1.0) * (2.0 * mu + sd * sd).exp();
            (mean, var.sqrt())
        };
        let (bm, bs) = moments(self.beta_prior.0, self.beta_prior.1);
        let (gm, gs) = moments(self.gamma_prior.0, self.gamma_prior.1);
        (vec![bm, gm], vec![bs, gs])
    }

    fn theta_support(&self) -> Vec<ParamSupport> {
        vec![ParamSupport::Positive; 2]
    }

    fn simulate(&self, theta: &[f64], xi: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let (lo, hi) = self.design_bounds();
        assert_design_in_bounds("sir", xi, &lo, &hi);
        let tau = xi[0].clamp(0.0, self.tau_max);
        let (traj, _clamps) = self.integrate(theta, tau, rng);
        // Interpolate at tau within the freshly integrated trajectory.
        let steps = traj.len() - 1;
        let pos = (tau / self.dt).clamp(0.0, steps as f64);
        let i0 = pos.floor() as usize;
        let i_mean = if i0 >= steps {
            traj[steps]
        } else {
            let frac = pos - i0 as f64;
            traj[i0] * (1.0 - frac) + traj[i0 + 1] * frac
        };
        vec![self.observe_noisy(i_mean, rng)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_infection_rate_keeps_s_constant_and_i_decays() {
        let model = SirModel { diffusion_scale: 0.0, ..SirModel::default() };
        let (traj, clamps) = model.integrate(&[0.0, 0.5], 10.0, &mut stream(1, &[0]));
        assert_eq!(clamps, 0);
        let mut prev = traj[0];
        for &i in &traj[1..] {
            assert!(i <= prev);
            prev = i;
        }
        // S stays at S0 when beta = 0: infected only flow out.
        assert!((traj[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn conservation_and_nonnegativity_on_the_grid() {
        // The integrator clamps so S, I >= 0 and S + I <= N; with R defined
        // as the remainder, S + I + R = N identically. Verify infected counts
        // stay in [0, N] across a pool of prior draws.
        let model = SirModel::default();
        let mut prior_rng = stream(2, &[0]);
        let thetas: Vec<Vec<f64>> = (0..16).map(|_| model.prior_sample(&mut prior_rng)).collect();
        let mut rngs: Vec<_> = (0..16).map(|i| stream(2, &[1, i as u64])).collect();
        let grid = model.pregrid(&thetas, &mut rngs);
        for traj in &grid.infected {
            for &i in traj {
                assert!((0.0..=model.population).contains(&i));
            }
        }
    }

    #[test]
    fn deterministic_limit_peak_matches_rk4() {
        // Noise-free Euler at dt=1e-2 vs RK4 at dt=1e-4.
        let model = SirModel { diffusion_scale: 0.0, ..SirModel::default() };
        let theta = [0.74, 0.09];
        let (traj, _) = model.integrate(&theta, 100.0, &mut stream(3, &[0]));
        let em_peak = traj
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as f64 * model.dt)
            .unwrap();

        // RK4 oracle on the same ODE.
        let n = model.population;
        let f = |s: f64, i: f64| -> (f64, f64) {
            let inf = theta[0] * s * i / n;
            let rec = theta[1] * i;
            (-inf, inf - rec)
        };
        let dt = 1e-4;
        let (mut s, mut i) = (n - 2.0, 2.0);
        let mut best = (0.0, i);
        let steps = (100.0 / dt) as usize;
        for k in 0..steps {
            let (k1s, k1i) = f(s, i);
            let (k2s, k2i) = f(s + 0.5 * dt * k1s, i + 0.5 * dt * k1i);
            let (k3s, k3i) = f(s + 0.5 * dt * k2s, i + 0.5 * dt * k2i);
            let (k4s, k4i) = f(s + dt * k3s, i + dt * k3i);
            s += dt / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s);
            i += dt / 6.0 * (k1i + 2.0 * k2i + 2.0 * k3i + k4i);
            let t = (k + 1) as f64 * dt;
            if i > best.1 {
                best = (t, i);
            }
        }
        let rk4_peak = best.0;
        assert!(
            (em_peak - rk4_peak).abs() / rk4_peak < 0.02,
            "EM peak {em_peak} vs RK4 peak {rk4_peak}"
        );
    }

    #[test]
    fn observe_at_zero_returns_initial_infected_plus_noise() {
        let model = SirModel::default();
        let thetas = vec![vec![1.0, 0.5]];
        let mut rngs = vec![stream(4, &[0])];
        let grid = model.pregrid(&thetas, &mut rngs);
        assert!((grid.interpolate(0, 0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn interpolation_between_grid_nodes() {
        let model = SirModel::default();
        let grid = SirGrid {
            dt: 0.5,
            tau_max: 1.0,
            infected: vec![vec![10.0, 20.0, 40.0]],
            clamp_events: 0,
            noise: SirNoise::Gaussian,
            population: 500.0,
        };
        assert!((grid.interpolate(0, 0.25) - 15.0).abs() < 1e-12);
        assert!((grid.interpolate(0, 0.75) - 30.0).abs() < 1e-12);
        let _ = model;
    }

    #[test]
    fn gaussian_observation_law_matches_ks() {
        // Histogram of observations at fixed (theta, xi) against the
        // configured Gaussian law.
        let model = SirModel::default();
        let i_mean = 87.3;
        let mut rng = stream(5, &[0]);
        let n = 10_000;
        let mut draws: Vec<f64> = (0..n).map(|_| model.observe_noisy(i_mean, &mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sd = i_mean.sqrt();
        let normal = statrs::distribution::Normal::new(i_mean, sd).unwrap();
        use statrs::distribution::ContinuousCDF;
        let mut ks: f64 = 0.0;
        for (k, &x) in draws.iter().enumerate() {
            let f = normal.cdf(x);
            let lo = k as f64 / n as f64;
            let hi = (k + 1) as f64 / n as f64;
            ks = ks.max((f - lo).abs().max((f - hi).abs()));
        }
        assert!(ks < 0.02, "KS {ks}");
    }

    #[test]
    fn poisson_observation_matches_moments() {
        let model = SirModel { noise: SirNoise::Poisson, ..SirModel::default() };
        let i_mean = 40.0;
        let mut rng = stream(6, &[0]);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| model.observe_noisy(i_mean, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        let se = (i_mean / n as f64).sqrt();
        assert!((mean - i_mean).abs() < 4.0 * se, "poisson mean {mean}");
        assert!((var / i_mean - 1.0).abs() < 0.1, "poisson var {var}");
    }

    #[test]
    fn purity() {
        let model = SirModel::default();
        let a = model.simulate(&[1.2, 0.4], &[13.5], &mut stream(7, &[0]));
        let b = model.simulate(&[1.2, 0.4], &[13.5], &mut stream(7, &[0]));
        assert_eq!(a, b);
    }

    #[test]
    fn prior_density_matches_sampler() {
        // E_q[p/q] = 1 with q a wider lognormal.
        let model = SirModel::default();
        let mut rng = stream(8, &[0]);
        let n = 100_000;
        let q = LogNormal::new(0.3, 0.8).unwrap();
        let q_lpdf = |x: f64| -> f64 {
            let z = (x.ln() - 0.3) / 0.8;
            -0.5 * z * z - x.ln() - (0.8f64).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        };
        let mut mean = 0.0;
        for _ in 0..n {
            let b: f64 = q.sample(&mut rng);
            let g: f64 = q.sample(&mut rng);
            let w = (model.prior_log_density(&[b, g]) - q_lpdf(b) - q_lpdf(g)).exp();
            mean += w;
        }
        mean /= n as f64;
        assert!((mean - 1.0).abs() < 0.05, "importance mean {mean}");
    }
}
