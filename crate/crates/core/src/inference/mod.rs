//! Posterior sampling from the trained surrogate and downstream
//! diagnostics.
//!
//! The MCMC target is the product likelihood over the design-observation
//! history times the prior,
//!   log pi(theta) = sum_i log p_flow(y_i | theta, xi_i) + log p(theta),
//! sampled by adaptive random-walk Metropolis in an unconstrained
//! parameterization (log space for positive-support coordinates, with the
//! Jacobian correction). Proposal scales adapt toward a 0.2-0.4 acceptance
//! rate during a discarded warm-up and are frozen afterwards.

mod sbc;
mod summary;

pub use sbc::{chi_square_uniform, sbc_coverage, CoverageCurve, PosteriorHook, SbcSettings};
pub use summary::{eig_report, median_distance, render_report, ReportRow, SeedRound};

use thiserror::Error;

use crate::ad::Tensor;
use crate::flow::{ConditionalFlow, FlowError};
use crate::rng::{module_stream, StreamId};
use crate::sim::{ParamSupport, Simulator};
use rand::Rng;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("empty sample set")]
    EmptySamples,
    #[error("chain {chain} rejected every post-warmup proposal (step-size pathology)")]
    AllRejected { chain: usize },
    #[error("non-finite log target at initialization of chain {chain}")]
    BadInit { chain: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone)]
pub struct McmcConfig {
    pub chains: usize,
    pub warmup: usize,
    /// Kept draws per chain.
    pub draws_per_chain: usize,
    /// Initial proposal scale in unconstrained space.
    pub initial_step: f64,
    /// Acceptance window targeted during warm-up.
    pub target_acceptance: (f64, f64),
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            warmup: 5_000,
            draws_per_chain: 5_000,
            initial_step: 0.5,
            target_acceptance: (0.2, 0.4),
        }
    }
}

impl McmcConfig {
    /// Smaller budget for inner loops (SBC trials).
    pub fn desk(chains: usize, warmup: usize, draws_per_chain: usize) -> Self {
        McmcConfig { chains, warmup, draws_per_chain, ..Default::default() }
    }
}

/// Posterior draws plus chain diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorSampleSet {
    /// [M, theta_dim] pooled post-warmup draws in the original space.
    pub samples: Tensor,
    pub acceptance: f64,
    /// Split R-hat per dimension.
    pub rhat: Vec<f64>,
    /// Effective sample size per dimension (pooled chains).
    pub ess: Vec<f64>,
    /// Number of (xi, y) pairs conditioned on.
    pub history_len: usize,
}

impl PosteriorSampleSet {
    pub fn mean(&self) -> Vec<f64> {
        let (m, d) = (self.samples.rows(), self.samples.cols());
        let mut out = vec![0.0; d];
        for i in 0..m {
            for c in 0..d {
                out[c] += self.samples.get2(i, c);
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        out
    }

    pub fn sd(&self) -> Vec<f64> {
        let (m, d) = (self.samples.rows(), self.samples.cols());
        let mean = self.mean();
        let mut out = vec![0.0; d];
        for i in 0..m {
            for c in 0..d {
                let r = self.samples.get2(i, c) - mean[c];
                out[c] += r * r;
            }
        }
        out.iter_mut().for_each(|v| *v = (*v / (m - 1) as f64).sqrt());
        out
    }

    /// Whether any dimension shows split R-hat above 1.1.
    pub fn rhat_flagged(&self) -> bool {
        self.rhat.iter().any(|&r| r > 1.1)
    }

    /// Determinant of the sample covariance (posterior volume proxy).
    pub fn covariance_det(&self) -> f64 {
        let (m, d) = (self.samples.rows(), self.samples.cols());
        let mean = self.mean();
        let mut cov = vec![0.0; d * d];
        for i in 0..m {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (self.samples.get2(i, a) - mean[a])
                        * (self.samples.get2(i, b) - mean[b]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= (m - 1) as f64);
        match d {
            1 => cov[0],
            2 => cov[0] * cov[3] - cov[1] * cov[2],
            _ => {
                // LU-free determinant via Gaussian elimination; d stays tiny.
                let mut a = cov;
                let mut det = 1.0;
                for k in 0..d {
                    let piv = a[k * d + k];
                    det *= piv;
                    if piv == 0.0 {
                        return 0.0;
                    }
                    for i in k + 1..d {
                        let f = a[i * d + k] / piv;
                        for j in k..d {
                            a[i * d + j] -= f * a[k * d + j];
                        }
                    }
                }
                det
            }
        }
    }
}

/// Transform between unconstrained z and theta using the declared support.
pub(crate) struct SupportMap {
    support: Vec<ParamSupport>,
}

impl SupportMap {
    pub fn new(support: Vec<ParamSupport>) -> Self {
        SupportMap { support }
    }

    pub fn to_theta(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.support)
            .map(|(&v, s)| match s {
                ParamSupport::Real => v,
                ParamSupport::Positive => v.exp(),
            })
            .collect()
    }

    pub fn to_z(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.support)
            .map(|(&v, s)| match s {
                ParamSupport::Real => v,
                ParamSupport::Positive => v.ln(),
            })
            .collect()
    }

    /// log |d theta / d z|.
    pub fn log_jacobian(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.support)
            .map(|(&v, s)| match s {
                ParamSupport::Real => 0.0,
                ParamSupport::Positive => v,
            })
            .sum()
    }
}

/// Unnormalized log posterior of the surrogate given a history, evaluated at
/// theta (original space). The product over history observations is one
/// batched flow evaluation.
pub fn surrogate_log_target(
    flow: &ConditionalFlow,
    history: &[(Vec<f64>, Vec<f64>)],
    sim: &dyn Simulator,
    theta: &[f64],
) -> Result<f64, InferenceError> {
    let prior = sim.prior_log_density(theta);
    if !prior.is_finite() {
        return Ok(f64::NEG_INFINITY);
    }
    if history.is_empty() {
        return Ok(prior);
    }
    let n = history.len();
    let dy = sim.y_dim();
    let dxi = sim.xi_dim();
    let mut y = Vec::with_capacity(n * dy);
    let mut xi = Vec::with_capacity(n * dxi);
    for (x, obs) in history {
        xi.extend_from_slice(x);
        y.extend_from_slice(obs);
    }
    let y = Tensor::matrix(n, dy, y);
    let theta_rep = Tensor::matrix(n, theta.len(), theta.repeat(n));
    let xi = if dxi > 0 { Some(Tensor::matrix(n, dxi, xi)) } else { None };
    let lp = flow.log_prob_values(&y, Some(&theta_rep), xi.as_ref())?;
    Ok(lp.iter().sum::<f64>() + prior)
}

/// Draw posterior samples for `flow` conditioned on the history.
pub fn mcmc_posterior(
    flow: &ConditionalFlow,
    history: &[(Vec<f64>, Vec<f64>)],
    sim: &dyn Simulator,
    config: &McmcConfig,
    seed: u64,
    tag: u64,
) -> Result<PosteriorSampleSet, InferenceError> {
    let target = |theta: &[f64]| surrogate_log_target(flow, history, sim, theta);
    mcmc_sample(&target, sim, config, seed, tag, history.len())
}

/// Generic adaptive random-walk Metropolis over a target density given in
/// the original parameter space.
pub fn mcmc_sample<F>(
    log_target: &F,
    sim: &dyn Simulator,
    config: &McmcConfig,
    seed: u64,
    tag: u64,
    history_len: usize,
) -> Result<PosteriorSampleSet, InferenceError>
where
    F: Fn(&[f64]) -> Result<f64, InferenceError>,
{
    let d = sim.theta_dim();
    let map = SupportMap::new(sim.theta_support());
    let mut chains: Vec<Vec<Vec<f64>>> = Vec::with_capacity(config.chains);
    let mut accept_total = 0u64;
    let mut accept_possible = 0u64;

    for chain in 0..config.chains {
        let mut rng = module_stream(seed, StreamId::Mcmc, &[tag, chain as u64]);
        // Overdispersed prior start: retry a few times if the target is
        // degenerate at the draw.
        let mut z = vec![0.0; d];
        let mut lp = f64::NEG_INFINITY;
        for _ in 0..100 {
            let theta = sim.prior_sample(&mut rng);
            let zc = map.to_z(&theta);
            let cand = log_target(&map.to_theta(&zc))? + map.log_jacobian(&zc);
            if cand.is_finite() {
                z = zc;
                lp = cand;
                break;
            }
        }
        if !lp.is_finite() {
            return Err(InferenceError::BadInit { chain });
        }

        let mut log_step = config.initial_step.ln();
        // Per-dimension proposal scales: identity during the first half of
        // warm-up, then frozen to the chain's empirical spread while the
        // global step re-equilibrates in the second half.
        let mut scales = vec![1.0; d];
        let mut mean = z.clone();
        let mut m2 = vec![0.0; d];
        let mut count = 0.0f64;
        let mut kept = Vec::with_capacity(config.draws_per_chain);
        let mut accepted_post = 0u64;

        let collect_from = config.warmup / 4;
        let freeze_at = config.warmup / 2;
        let total = config.warmup + config.draws_per_chain;
        for it in 0..total {
            let warm = it < config.warmup;
            let step = log_step.exp();
            let mut prop = z.clone();
            for c in 0..d {
                prop[c] += step * scales[c] * crate::sim::draw_std_normal(&mut rng);
            }
            let lp_prop = log_target(&map.to_theta(&prop))? + map.log_jacobian(&prop);
            let alpha = (lp_prop - lp).min(0.0);
            let accept = alpha.is_finite() && rng.random::<f64>().ln() < alpha;
            if accept {
                z = prop;
                lp = lp_prop;
            }
            if warm {
                // Robbins-Monro on the log step toward the target window.
                let target_mid =
                    0.5 * (config.target_acceptance.0 + config.target_acceptance.1);
                let anneal_from = if it < freeze_at { it } else { it - freeze_at };
                let gamma = 1.0 / (1.0 + anneal_from as f64).powf(0.6);
                log_step += gamma * (if accept { 1.0 } else { 0.0 } - target_mid);
                if it >= collect_from && it < freeze_at {
                    count += 1.0;
                    for c in 0..d {
                        let delta = z[c] - mean[c];
                        mean[c] += delta / count;
                        m2[c] += delta * (z[c] - mean[c]);
                    }
                }
                if it + 1 == freeze_at && count > 8.0 {
                    for c in 0..d {
                        scales[c] = (m2[c] / count).sqrt().max(1e-6);
                    }
                }
            } else {
                if accept {
                    accepted_post += 1;
                }
                kept.push(map.to_theta(&z));
            }
        }
        if config.draws_per_chain > 0 && accepted_post == 0 {
            return Err(InferenceError::AllRejected { chain });
        }
        accept_total += accepted_post;
        accept_possible += config.draws_per_chain as u64;
        chains.push(kept);
    }

    let rhat = split_rhat(&chains, d);
    let ess = effective_sample_size(&chains, d);
    let m = config.chains * config.draws_per_chain;
    let mut data = Vec::with_capacity(m * d);
    for chain in &chains {
        for draw in chain {
            data.extend_from_slice(draw);
        }
    }
    Ok(PosteriorSampleSet {
        samples: Tensor::matrix(m, d, data),
        acceptance: accept_total as f64 / accept_possible.max(1) as f64,
        rhat,
        ess,
        history_len,
    })
}

/// Split R-hat: each chain halved, between/within variance ratio.
fn split_rhat(chains: &[Vec<Vec<f64>>], d: usize) -> Vec<f64> {
    let mut halves: Vec<&[Vec<f64>]> = Vec::new();
    let mut storage: Vec<Vec<Vec<f64>>> = Vec::new();
    for chain in chains {
        let mid = chain.len() / 2;
        storage.push(chain[..mid].to_vec());
        storage.push(chain[mid..].to_vec());
    }
    for s in &storage {
        halves.push(s.as_slice());
    }
    let m = halves.len() as f64;
    let n = halves.first().map(|h| h.len()).unwrap_or(0) as f64;
    let mut out = Vec::with_capacity(d);
    for c in 0..d {
        let means: Vec<f64> = halves
            .iter()
            .map(|h| h.iter().map(|x| x[c]).sum::<f64>() / n)
            .collect();
        let grand = means.iter().sum::<f64>() / m;
        let b = n / (m - 1.0) * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>();
        let w = halves
            .iter()
            .zip(&means)
            .map(|(h, mu)| h.iter().map(|x| (x[c] - mu) * (x[c] - mu)).sum::<f64>() / (n - 1.0))
            .sum::<f64>()
            / m;
        let var_plus = (n - 1.0) / n * w + b / n;
        out.push((var_plus / w).sqrt());
    }
    out
}

/// Effective sample size via the initial positive sequence of
/// autocovariances, averaged over chains.
fn effective_sample_size(chains: &[Vec<Vec<f64>>], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d);
    let total: usize = chains.iter().map(|c| c.len()).sum();
    for c in 0..d {
        let mut tau_sum = 0.0;
        for chain in chains {
            let xs: Vec<f64> = chain.iter().map(|x| x[c]).collect();
            tau_sum += integrated_autocorrelation(&xs);
        }
        let tau = tau_sum / chains.len() as f64;
        out.push(total as f64 / tau.max(1.0));
    }
    out
}

fn integrated_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return n as f64;
    }
    let auto = |lag: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..n - lag {
            s += (xs[i] - mean) * (xs[i + lag] - mean);
        }
        s / (n as f64 * var)
    };
    let mut tau = 1.0;
    let mut lag = 1;
    // Geyer initial positive sequence over adjacent lag pairs.
    while lag + 1 < n / 2 {
        let pair = auto(lag) + auto(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    tau
}

/// Resample a pool tensor from posterior draws, preserving order
/// determinism.
pub fn pool_from_posterior(set: &PosteriorSampleSet, size: usize, seed: u64, tag: u64) -> Tensor {
    let mut rng = module_stream(seed, StreamId::ThetaPool, &[tag]);
    crate::objective::resample_pool(&set.samples, size, &mut rng)
}
