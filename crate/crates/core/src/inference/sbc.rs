//! Simulation-based calibration: rank statistics and expected coverage.
//!
//! Each trial draws theta from the prior, simulates an outcome at the
//! evaluation design, samples the posterior under test, and records where
//! the true theta ranks among the draws. Calibrated posteriors give uniform
//! ranks, hence a diagonal coverage curve.

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::flow::ConditionalFlow;
use crate::rng::{module_stream, StreamId};
use crate::sim::{GaussOracle, Simulator};

use super::{mcmc_posterior, InferenceError, McmcConfig};

/// Posterior sampler used for each SBC trial.
pub enum PosteriorHook<'a> {
    /// The real pipeline: MCMC over the surrogate likelihood.
    Surrogate(&'a ConditionalFlow, McmcConfig),
    /// Analytic conjugate posterior of the linear-Gaussian oracle.
    ExactConjugate(&'a GaussOracle),
    /// Miscalibration hook: ignore the likelihood, sample the prior.
    PriorOnly,
    /// Conservative hook: conjugate posterior with inflated variance.
    VarianceInflated(&'a GaussOracle, f64),
}

#[derive(Debug, Clone)]
pub struct SbcSettings {
    pub trials: usize,
    pub draws_per_trial: usize,
    pub levels: Vec<f64>,
}

impl Default for SbcSettings {
    fn default() -> Self {
        SbcSettings {
            trials: 200,
            draws_per_trial: 1_000,
            levels: (1..=19).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

/// Empirical expected coverage per credibility level.
#[derive(Debug, Clone)]
pub struct CoverageCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    pub trials: usize,
    /// Trials excluded because the posterior sampler failed.
    pub failures: usize,
    /// Per-dimension rank of the true theta among the posterior draws.
    pub ranks: Vec<Vec<usize>>,
    pub draws_per_trial: usize,
}

impl CoverageCurve {
    /// 95% binomial band around the diagonal at one level.
    pub fn binomial_band(&self, level: f64) -> (f64, f64) {
        let se = (level * (1.0 - level) / self.trials as f64).sqrt();
        ((level - 1.96 * se).max(0.0), (level + 1.96 * se).min(1.0))
    }

    /// All levels inside the 95% binomial band.
    pub fn inside_band(&self) -> bool {
        self.levels
            .iter()
            .zip(&self.coverage)
            .all(|(&l, &c)| {
                let (lo, hi) = self.binomial_band(l);
                c >= lo && c <= hi
            })
    }

    /// Coverage is a non-decreasing function of the level by construction;
    /// exposed for the invariant test.
    pub fn is_monotone(&self) -> bool {
        self.coverage.windows(2).all(|w| w[1] >= w[0] - 1e-12)
    }
}

/// Run simulation-based calibration for a simulator at a fixed design.
pub fn sbc_coverage(
    sim: &dyn Simulator,
    design: &[f64],
    hook: &PosteriorHook,
    settings: &SbcSettings,
    seed: u64,
) -> Result<CoverageCurve, InferenceError> {
    let d = sim.theta_dim();
    let mut ranks: Vec<Vec<usize>> = vec![Vec::with_capacity(settings.trials); d];
    let mut covered = vec![0usize; settings.levels.len()];
    let mut completed = 0usize;
    let mut failures = 0usize;

    for trial in 0..settings.trials {
        let mut rng = module_stream(seed, StreamId::Sbc, &[trial as u64]);
        let theta_true = sim.prior_sample(&mut rng);
        let y = sim.simulate(&theta_true, design, &mut rng);

        let draws = match posterior_draws(sim, hook, design, &y, settings.draws_per_trial, seed, trial as u64)
        {
            Ok(draws) => draws,
            Err(_) => {
                failures += 1;
                continue;
            }
        };

        completed += 1;
        for c in 0..d {
            let mut column: Vec<f64> = draws.iter().map(|row| row[c]).collect();
            column.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let rank = column.partition_point(|&v| v < theta_true[c]);
            ranks[c].push(rank);
            for (li, &level) in settings.levels.iter().enumerate() {
                let lo_q = quantile(&column, 0.5 * (1.0 - level));
                let hi_q = quantile(&column, 0.5 * (1.0 + level));
                if theta_true[c] >= lo_q && theta_true[c] <= hi_q {
                    covered[li] += 1;
                }
            }
        }
    }

    if completed == 0 {
        return Err(InferenceError::EmptySamples);
    }
    let denom = (completed * d) as f64;
    Ok(CoverageCurve {
        levels: settings.levels.clone(),
        coverage: covered.iter().map(|&c| c as f64 / denom).collect(),
        trials: completed,
        failures,
        ranks,
        draws_per_trial: settings.draws_per_trial,
    })
}

fn posterior_draws(
    sim: &dyn Simulator,
    hook: &PosteriorHook,
    design: &[f64],
    y: &[f64],
    draws: usize,
    seed: u64,
    trial: u64,
) -> Result<Vec<Vec<f64>>, InferenceError> {
    match hook {
        PosteriorHook::Surrogate(flow, config) => {
            let history = vec![(design.to_vec(), y.to_vec())];
            let set = mcmc_posterior(flow, &history, sim, config, seed, 1_000_000 + trial)?;
            let m = set.samples.rows();
            let take = draws.min(m);
            let stride = (m / take.max(1)).max(1);
            Ok((0..take)
                .map(|k| {
                    let i = (k * stride).min(m - 1);
                    (0..set.samples.cols()).map(|c| set.samples.get2(i, c)).collect()
                })
                .collect())
        }
        PosteriorHook::ExactConjugate(oracle) => {
            let (mean, var) = oracle.conjugate_posterior(&[(design[0], y[0])]);
            let mut rng = module_stream(seed, StreamId::Sbc, &[9_000_000, trial]);
            Ok((0..draws)
                .map(|_| vec![mean + var.sqrt() * crate::sim::draw_std_normal(&mut rng)])
                .collect())
        }
        PosteriorHook::VarianceInflated(oracle, factor) => {
            let (mean, var) = oracle.conjugate_posterior(&[(design[0], y[0])]);
            let mut rng = module_stream(seed, StreamId::Sbc, &[9_100_000, trial]);
            Ok((0..draws)
                .map(|_| vec![mean + (var * factor).sqrt() * crate::sim::draw_std_normal(&mut rng)])
                .collect())
        }
        PosteriorHook::PriorOnly => {
            let mut rng = module_stream(seed, StreamId::Sbc, &[9_200_000, trial]);
            Ok((0..draws).map(|_| sim.prior_sample(&mut rng)).collect())
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    let frac = pos - i as f64;
    sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
}

/// Chi-square uniformity test of SBC ranks. Returns (statistic, p-value)
/// over `bins` equal-width bins of the rank range 0..=draws.
pub fn chi_square_uniform(ranks: &[usize], draws: usize, bins: usize) -> (f64, f64) {
    let n = ranks.len();
    let mut counts = vec![0usize; bins];
    for &r in ranks {
        let bin = ((r as f64 / (draws + 1) as f64) * bins as f64).floor() as usize;
        counts[bin.min(bins - 1)] += 1;
    }
    let expected = n as f64 / bins as f64;
    let stat: f64 =
        counts.iter().map(|&c| (c as f64 - expected) * (c as f64 - expected) / expected).sum();
    let dist = ChiSquared::new((bins - 1) as f64).expect("valid dof");
    let p = 1.0 - dist.cdf(stat);
    (stat, p)
}
