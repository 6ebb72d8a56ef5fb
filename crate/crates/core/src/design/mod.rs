//! Design-side machinery: the truncated-normal design distribution with its
//! decaying sigma schedule, optimizers, and the sequential training driver.

mod optimizer;
mod trainer;

pub use optimizer::{global_norm, Adam, AdamConfig, PlateauScheduler};
pub use trainer::{
    prior_pool, run_sbi_boed, standardized_flow_config, train_round, BoedRound, BoedRunResult,
    BoedSettings, DesignCheckpoint, DesignMode, PlateauConfig, RunRecord, StepRow, TrainError,
    TrainOutput, TrainSettings,
};

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ad::{Tape, Tensor, Var};

/// Truncated normal over designs with trainable mean and scheduled sigma.
#[derive(Debug, Clone)]
pub struct DesignDistribution {
    /// Current mean, one entry per design coordinate.
    pub mu: Vec<f64>,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Decay rate rho of the exponential schedule.
    pub decay_rate: f64,
    /// Total scheduled steps N.
    pub total_steps: usize,
    /// Per-coordinate design bounds.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DesignDistribution {
    pub fn new(mu: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(mu.len(), lo.len());
        assert_eq!(mu.len(), hi.len());
        assert!(
            lo.iter().zip(&hi).all(|(l, h)| l < h),
            "degenerate design bounds"
        );
        DesignDistribution {
            mu,
            sigma_start: 0.0,
            sigma_end: 0.0,
            decay_rate: 1.0,
            total_steps: 1,
            lo,
            hi,
        }
    }

    pub fn with_schedule(
        mut self,
        sigma_start: f64,
        sigma_end: f64,
        decay_rate: f64,
        total_steps: usize,
    ) -> Self {
        assert!(sigma_start >= 0.0 && sigma_end >= 0.0 && sigma_end <= sigma_start);
        self.sigma_start = sigma_start;
        self.sigma_end = sigma_end;
        self.decay_rate = decay_rate;
        self.total_steps = total_steps.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// sigma_n = sigma_end + (sigma_start - sigma_end) * exp(-n*rho/N).
    pub fn sigma_at(&self, n: usize) -> f64 {
        self.sigma_end
            + (self.sigma_start - self.sigma_end)
                * (-(n as f64) * self.decay_rate / self.total_steps as f64).exp()
    }

    /// Clamp the stored mean into the design bounds.
    pub fn project_mu(&mut self) {
        for ((m, &l), &h) in self.mu.iter_mut().zip(&self.lo).zip(&self.hi) {
            *m = m.clamp(l, h);
        }
    }

    /// Sample `count` designs at schedule step `n` through the inverse-CDF
    /// reparameterization, wiring the pathwise gradient to `mu_var`.
    ///
    /// Returns the design node (shape [count, d]) and the design values
    /// clamped into bounds for simulator consumption.
    pub fn sample_graph(
        &self,
        tape: &mut Tape,
        mu_var: Var,
        n: usize,
        count: usize,
        rng: &mut impl Rng,
    ) -> (Var, Tensor) {
        let d = self.dim();
        debug_assert_eq!(tape.value(mu_var).len(), d, "mu leaf dimension mismatch");
        let sigma = self.sigma_at(n);

        let xi = if sigma > 0.0 {
            let noise: Vec<f64> = (0..count * d)
                .map(|_| rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12))
                .collect();
            let noise = tape.constant(Tensor::matrix(count, d, noise));
            let lo = tape.constant(Tensor::vector(self.lo.clone()));
            let hi = tape.constant(Tensor::vector(self.hi.clone()));
            let a = {
                let diff = tape.sub(lo, mu_var);
                tape.scale(diff, 1.0 / sigma)
            };
            let b = {
                let diff = tape.sub(hi, mu_var);
                tape.scale(diff, 1.0 / sigma)
            };
            let fa = tape.normal_cdf(a);
            let fb = tape.normal_cdf(b);
            let range = tape.sub(fb, fa);
            let p = {
                let scaled = tape.mul_row(noise, range);
                let shifted = tape.add_row(scaled, fa);
                tape.clamp(shifted, 1e-15, 1.0 - 1e-16)
            };
            let z = tape.normal_icdf(p);
            let spread = tape.scale(z, sigma);
            tape.add_row(spread, mu_var)
        } else {
            // Point mass at mu.
            let mu_mat = tape.reshape(mu_var, &[1, d]);
            tape.gather_rows(mu_mat, &vec![0; count])
        };

        let mut values = tape.value(xi).clone();
        for r in 0..count {
            for c in 0..d {
                let i = r * d + c;
                values.data_mut()[i] = values.data()[i].clamp(self.lo[c], self.hi[c]);
            }
        }
        (xi, values)
    }

    /// Plain draws without a tape (diagnostics and tests).
    pub fn sample_values(&self, n: usize, count: usize, rng: &mut impl Rng) -> Tensor {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::vector(self.mu.clone()));
        let (_, values) = self.sample_graph(&mut tape, mu, n, count, rng);
        values
    }

    /// Log density of one design under the truncated normal at step `n`.
    pub fn log_density(&self, n: usize, xi: &[f64]) -> f64 {
        let sigma = self.sigma_at(n);
        assert!(sigma > 0.0, "log density undefined for a point mass");
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut total = 0.0;
        for c in 0..self.dim() {
            if xi[c] < self.lo[c] || xi[c] > self.hi[c] {
                return f64::NEG_INFINITY;
            }
            let a = (self.lo[c] - self.mu[c]) / sigma;
            let b = (self.hi[c] - self.mu[c]) / sigma;
            let z = (xi[c] - self.mu[c]) / sigma;
            let log_pdf = -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln();
            total += log_pdf - (std.cdf(b) - std.cdf(a)).ln();
        }
        total
    }
}
