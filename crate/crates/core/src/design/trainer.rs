//! Sequential design-optimization driver.
//!
//! Each training step samples designs from the truncated-normal design
//! distribution (reparameterized so the pathwise gradient reaches the mean),
//! simulates outcomes at those designs under pool-drawn parameters,
//! evaluates the regularized contrastive loss, and updates the flow
//! parameters and the design mean with clipped Adam steps. The best
//! step-mean information gain seen so far is checkpointed together with the
//! flow that scored it. Rounds chain through posterior sampling: parameters
//! for round t are drawn from the posterior after round t-1.

use thiserror::Error;

use crate::ad::{Tape, Tensor};
use crate::flow::{ConditionalFlow, FlowError};
use crate::inference::{mcmc_posterior, InferenceError, McmcConfig, PosteriorSampleSet};
use crate::objective::{
    contrastive_graph, flow_closure, ContrastiveBatch, ObjectiveError, Variant,
};
use crate::rng::{module_stream, StreamId};
use crate::sim::Simulator;
use rand::Rng;

use super::{Adam, AdamConfig, DesignDistribution, PlateauScheduler};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; diagnostics: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },
    #[error("simulator produced a non-finite outcome at step {step}, row {row}")]
    BadOutcome { step: u64, row: usize },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("posterior inference failed in round {round}: {source}")]
    Inference { round: u64, source: InferenceError },
}

/// How designs are produced during a round.
#[derive(Debug, Clone)]
pub enum DesignMode {
    /// Truncated normal with the scheduled sigma (the full method).
    Distribution { sigma_start: f64, sigma_end: f64, decay_rate: f64, mu_init: Option<Vec<f64>> },
    /// Point designs: sigma identically zero, mean still optimized.
    PointDesign { mu_init: Option<Vec<f64>> },
    /// Designs pinned to a constant; nothing design-side is trained.
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct PlateauConfig {
    pub factor: f64,
    pub min_lr: f64,
    pub patience: usize,
    pub window: usize,
}

impl PlateauConfig {
    pub fn new(factor: f64, min_lr: f64) -> Self {
        PlateauConfig { factor, min_lr, patience: 200, window: 50 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub steps: usize,
    /// Batch rows N per step.
    pub batch: usize,
    /// Contrastive draws L per step.
    pub contrast: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Learning rate for the design mean; defaults to `lr` when None.
    pub lr_xi: Option<f64>,
    /// Second-moment decay for the design group.
    pub beta2_xi: f64,
    /// Global-norm clip per parameter group.
    pub clip: Option<f64>,
    pub plateau: Option<PlateauConfig>,
    pub mode: DesignMode,
    pub per_row_contrast: bool,
    /// Checkpoint the batch argmax design instead of the distribution mean.
    pub checkpoint_argmax: bool,
    /// Worker threads for per-step simulator calls.
    pub jobs: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(steps: usize, batch: usize, contrast: usize, lambda: f64, seed: u64) -> Self {
        TrainSettings {
            steps,
            batch,
            contrast,
            lambda,
            lr: 1e-3,
            lr_xi: None,
            beta2_xi: 0.95,
            clip: Some(5.0),
            plateau: None,
            mode: DesignMode::Distribution {
                sigma_start: 0.0,
                sigma_end: 0.0,
                decay_rate: 1.0,
                mu_init: None,
            },
            per_row_contrast: false,
            checkpoint_argmax: false,
            jobs: 1,
            seed,
        }
    }
}

/// One metrics row per training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: u64,
    /// Minimized objective (negative regularized bound).
    pub loss: f64,
    /// Step-mean information gain at the run's lambda.
    pub eig: f64,
    /// Same batch evaluated at lambda = 0 (the plain bound).
    pub eig_nce: f64,
    pub sigma: f64,
    /// Design mean used for this step's draws.
    pub mu: Vec<f64>,
    pub lr: f64,
    pub checkpoint: bool,
    pub grad_norm_phi: f64,
    pub grad_norm_xi: f64,
}

/// Append-only per-round record.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub round: u64,
    pub steps: Vec<StepRow>,
}

impl RunRecord {
    pub fn max_eig(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.eig).fold(None, |acc, v| match acc {
            Some(a) if a >= v => Some(a),
            _ => Some(v),
        })
    }
}

/// Best design seen in a round, with the flow state that scored it.
#[derive(Debug, Clone)]
pub struct DesignCheckpoint {
    pub xi_star: Vec<f64>,
    pub eig_star: f64,
    pub step: u64,
    /// Serialized flow as of the checkpointed step.
    pub flow_snapshot: Vec<u8>,
}

pub struct TrainOutput {
    pub checkpoint: DesignCheckpoint,
    pub record: RunRecord,
    pub final_mu: Vec<f64>,
}

fn mu_start(sim: &dyn Simulator, mode: &DesignMode) -> Vec<f64> {
    let (lo, hi) = sim.design_bounds();
    let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
    match mode {
        DesignMode::Distribution { mu_init: Some(m), .. }
        | DesignMode::PointDesign { mu_init: Some(m) } => m.clone(),
        DesignMode::Fixed(x) => x.clone(),
        _ => mid,
    }
}

/// Run one design-optimization round against a fixed theta pool.
pub fn train_round(
    sim: &dyn Simulator,
    flow: &mut ConditionalFlow,
    pool: &Tensor,
    settings: &TrainSettings,
    round: u64,
) -> Result<TrainOutput, TrainError> {
    let has_designs = sim.xi_dim() > 0;
    let (lo, hi) = sim.design_bounds();
    let n = settings.batch;
    let l = settings.contrast;
    let seed = settings.seed;

    let mut dist = if has_designs {
        let d = DesignDistribution::new(mu_start(sim, &settings.mode), lo.clone(), hi.clone());
        Some(match &settings.mode {
            DesignMode::Distribution { sigma_start, sigma_end, decay_rate, .. } => {
                d.with_schedule(*sigma_start, *sigma_end, *decay_rate, settings.steps)
            }
            _ => d,
        })
    } else {
        None
    };

    let mut adam_phi =
        Adam::new(AdamConfig::new(settings.lr).with_clip(settings.clip), flow.params());
    let mu_tensor = vec![Tensor::vector(mu_start(sim, &settings.mode))];
    let lr_xi = settings.lr_xi.unwrap_or(settings.lr);
    let mut adam_xi = Adam::new(
        AdamConfig::new(lr_xi).with_beta2(settings.beta2_xi).with_clip(settings.clip),
        &mu_tensor,
    );
    let mut plateau = settings
        .plateau
        .as_ref()
        .map(|p| PlateauScheduler::new(p.factor, p.patience, p.min_lr, p.window));

    let source = sim.prepare_round(pool, seed, round);
    let pool_rows = pool.rows();
    let dth = sim.theta_dim();
    let train_designs =
        has_designs && !matches!(settings.mode, DesignMode::Fixed(_));

    let mut record = RunRecord { round, steps: Vec::with_capacity(settings.steps) };
    let mut best: Option<DesignCheckpoint> = None;

    for step in 0..settings.steps as u64 {
        // Pool draws for this step: batch roots plus the contrastive set.
        let mut idx_rng = module_stream(seed, StreamId::Contrastive, &[round, step]);
        let root_idx: Vec<usize> =
            (0..n).map(|_| idx_rng.random_range(0..pool_rows)).collect();
        let contrast_rows = if settings.per_row_contrast { n * l } else { l };
        let contrast_idx: Vec<usize> =
            (0..contrast_rows).map(|_| idx_rng.random_range(0..pool_rows)).collect();
        let gather = |idx: &[usize]| -> Tensor {
            let mut data = Vec::with_capacity(idx.len() * dth);
            for &i in idx {
                data.extend_from_slice(&pool.data()[i * dth..(i + 1) * dth]);
            }
            Tensor::matrix(idx.len(), dth, data)
        };
        let theta0 = gather(&root_idx);
        let contrast = gather(&contrast_idx);

        // Designs for the step.
        let mut tape = Tape::new();
        let (xi_node, xi_values, mu_used, sigma) = if has_designs {
            let dist_ref = dist.as_ref().expect("designs imply a distribution");
            match &settings.mode {
                DesignMode::Fixed(x) => {
                    let mut tiled = Vec::with_capacity(n * x.len());
                    for _ in 0..n {
                        tiled.extend_from_slice(x);
                    }
                    (None, Some(Tensor::matrix(n, x.len(), tiled)), x.clone(), 0.0)
                }
                _ => {
                    let mut drng =
                        module_stream(seed, StreamId::DesignNoise, &[round, step]);
                    let mu_leaf = tape.param(Tensor::vector(dist_ref.mu.clone()));
                    let (node, values) =
                        dist_ref.sample_graph(&mut tape, mu_leaf, step as usize, n, &mut drng);
                    (
                        Some((node, mu_leaf)),
                        Some(values),
                        dist_ref.mu.clone(),
                        dist_ref.sigma_at(step as usize),
                    )
                }
            }
        } else {
            (None, None, Vec::new(), 0.0)
        };

        // Simulate outcomes at the drawn designs.
        let y = simulate_batch(
            sim,
            &source,
            &root_idx,
            &theta0,
            xi_values.as_ref(),
            seed,
            round,
            step,
            settings.jobs,
        );
        if let Some(row) = y.first_nonfinite().map(|e| e / sim.y_dim().max(1)) {
            return Err(TrainError::BadOutcome { step, row });
        }

        let batch = ContrastiveBatch {
            theta0,
            contrast,
            per_row_contrast: settings.per_row_contrast,
            y,
            xi: xi_values,
            lambda: settings.lambda,
        };

        let vars = flow.bind(&mut tape, true);
        let graph = contrastive_graph(
            &mut tape,
            &batch,
            Variant::NceLambda,
            None,
            xi_node.map(|(node, _)| node),
            flow_closure(flow, &vars),
        )?;
        let eig = tape.value(graph.value).item();
        let mean_anchor = {
            let v = tape.value(graph.anchor);
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let eig_nce = eig - settings.lambda * mean_anchor;
        let loss_var = tape.neg(graph.value);
        let loss = tape.value(loss_var).item();
        if !loss.is_finite() {
            let node = tape.first_nonfinite_node();
            return Err(TrainError::NonFiniteLoss {
                step,
                diagnostics: format!(
                    "mu {:?}, sigma {sigma:.4}, first non-finite tape node {:?}",
                    mu_used, node
                ),
            });
        }

        // Checkpoint before mutating the flow: the snapshot scored this EIG.
        let improved = best.as_ref().map(|b| eig > b.eig_star).unwrap_or(true);
        if improved {
            let xi_star = if settings.checkpoint_argmax && batch.xi.is_some() {
                let per_row = tape.value(graph.per_row);
                let mut arg = 0;
                for i in 1..per_row.len() {
                    if per_row.data()[i] > per_row.data()[arg] {
                        arg = i;
                    }
                }
                let xim = batch.xi.as_ref().unwrap();
                (0..xim.cols()).map(|c| xim.get2(arg, c)).collect()
            } else if has_designs {
                mu_used.iter().zip(lo.iter().zip(&hi)).map(|(m, (l, h))| m.clamp(*l, *h)).collect()
            } else {
                Vec::new()
            };
            flow.set_step(step);
            best = Some(DesignCheckpoint {
                xi_star,
                eig_star: eig,
                step,
                flow_snapshot: flow.to_bytes(),
            });
        }

        // Gradient step on phi and the design mean.
        let grads = tape.backward(loss_var);
        let mut phi_grads: Vec<Tensor> = vars.all().iter().map(|&v| grads.wrt(v)).collect();
        let norm_phi = adam_phi.step(flow.params_mut(), &mut phi_grads);
        let norm_xi = if train_designs {
            let (_, mu_leaf) = xi_node.expect("trainable designs have a mu leaf");
            let dist_mut = dist.as_mut().expect("designs imply a distribution");
            let mut mu_param = vec![Tensor::vector(dist_mut.mu.clone())];
            let mut mu_grads = vec![grads.wrt(mu_leaf)];
            let norm = adam_xi.step(&mut mu_param, &mut mu_grads);
            dist_mut.mu = mu_param[0].data().to_vec();
            dist_mut.project_mu();
            norm
        } else {
            0.0
        };

        if let Some(sched) = plateau.as_mut() {
            if let Some(new_lr) = sched.observe(loss, adam_phi.config.lr) {
                let ratio = new_lr / adam_phi.config.lr;
                adam_phi.config.lr = new_lr;
                adam_xi.config.lr *= ratio;
            }
        }

        record.steps.push(StepRow {
            step,
            loss,
            eig,
            eig_nce,
            sigma,
            mu: mu_used,
            lr: adam_phi.config.lr,
            checkpoint: improved,
            grad_norm_phi: norm_phi,
            grad_norm_xi: norm_xi,
        });
    }

    let final_mu = dist.map(|d| d.mu).unwrap_or_default();
    let checkpoint = best.expect("at least one step");
    debug_assert_eq!(Some(checkpoint.eig_star), record.max_eig());
    Ok(TrainOutput { checkpoint, record, final_mu })
}

#[allow(clippy::too_many_arguments)]
fn simulate_batch(
    sim: &dyn Simulator,
    source: &crate::sim::RoundSource,
    root_idx: &[usize],
    theta0: &Tensor,
    xi: Option<&Tensor>,
    seed: u64,
    round: u64,
    step: u64,
    jobs: usize,
) -> Tensor {
    let n = root_idx.len();
    let dy = sim.y_dim();
    let dth = theta0.cols();
    let row_outcome = |i: usize| -> Vec<f64> {
        let theta: Vec<f64> = (0..dth).map(|c| theta0.get2(i, c)).collect();
        let xrow: Vec<f64> = match xi {
            Some(x) => (0..x.cols()).map(|c| x.get2(i, c)).collect(),
            None => Vec::new(),
        };
        let mut rng = module_stream(seed, StreamId::Simulator, &[round, step, i as u64]);
        source.outcome(sim, root_idx[i], &theta, &xrow, &mut rng)
    };

    let mut data = vec![0.0; n * dy];
    if jobs <= 1 || n < 2 * jobs {
        for i in 0..n {
            data[i * dy..(i + 1) * dy].copy_from_slice(&row_outcome(i));
        }
    } else {
        // Disjoint chunks; per-row streams keep the result identical to the
        // sequential order.
        let chunk = n.div_ceil(jobs);
        let slots: Vec<(usize, &mut [f64])> =
            data.chunks_mut(chunk * dy).enumerate().collect();
        std::thread::scope(|scope| {
            for (ci, slot) in slots {
                let row_outcome = &row_outcome;
                scope.spawn(move || {
                    let start = ci * chunk;
                    for (k, out) in slot.chunks_mut(dy).enumerate() {
                        out.copy_from_slice(&row_outcome(start + k));
                    }
                });
            }
        });
    }
    Tensor::matrix(n, dy, data)
}

/// Prior-predictive standardization for a fresh flow: theta moments from the
/// prior, y moments from simulations at calibration designs.
pub fn standardized_flow_config(
    sim: &dyn Simulator,
    mut config: crate::flow::FlowConfig,
    calibration_design: Option<&[f64]>,
    draws: usize,
    seed: u64,
) -> crate::flow::FlowConfig {
    let (prior_mean, prior_sd) = sim.prior_moments();
    config = config.with_theta_standardization(prior_mean, prior_sd);
    let (lo, hi) = sim.design_bounds();
    if sim.xi_dim() > 0 {
        config = config.with_design_bounds(lo.clone(), hi.clone());
    }

    let dy = sim.y_dim();
    let mut sums = vec![0.0; dy];
    let mut sq = vec![0.0; dy];
    for i in 0..draws {
        let mut rng = module_stream(seed, StreamId::Calibration, &[i as u64]);
        let theta = sim.prior_sample(&mut rng);
        let xi: Vec<f64> = match calibration_design {
            Some(d) => d.to_vec(),
            None => lo.iter().zip(&hi).map(|(l, h)| rng.random_range(*l..*h)).collect(),
        };
        let y = sim.simulate(&theta, &xi, &mut rng);
        for c in 0..dy {
            sums[c] += y[c];
            sq[c] += y[c] * y[c];
        }
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / draws as f64).collect();
    let sd: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| ((s / draws as f64 - m * m).max(1e-12)).sqrt().max(1e-6))
        .collect();
    config.with_y_standardization(mean, sd)
}

/// One completed experiment round.
pub struct BoedRound {
    pub round: u64,
    pub checkpoint: DesignCheckpoint,
    pub record: RunRecord,
    pub observed: Vec<f64>,
    pub posterior_mean: Vec<f64>,
    pub posterior_sd: Vec<f64>,
    pub posterior: PosteriorSampleSet,
}

pub struct BoedRunResult {
    pub rounds: Vec<BoedRound>,
    pub flow: ConditionalFlow,
    /// Accumulated (xi_star, y_o) pairs.
    pub history: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct BoedSettings {
    pub rounds: usize,
    pub pool_size: usize,
    /// Hidden ground-truth parameters used to "observe" outcomes.
    pub truth: Vec<f64>,
    pub train: TrainSettings,
    pub mcmc: McmcConfig,
}

/// Full sequential loop: per round, optimize designs, observe at the
/// checkpointed design under the hidden truth, refresh the parameter pool
/// from the surrogate posterior.
pub fn run_sbi_boed(
    sim: &dyn Simulator,
    mut flow: ConditionalFlow,
    settings: &BoedSettings,
) -> Result<BoedRunResult, TrainError> {
    assert!(settings.rounds >= 1, "at least one round");
    assert!(sim.xi_dim() > 0, "sequential design needs a design space");
    let seed = settings.train.seed;

    let mut history: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut rounds = Vec::with_capacity(settings.rounds);
    let mut pool = prior_pool(sim, settings.pool_size, seed, 1);

    for round in 1..=settings.rounds as u64 {
        let out = train_round(sim, &mut flow, &pool, &settings.train, round)?;

        let mut obs_rng = module_stream(seed, StreamId::Observation, &[round]);
        let observed = sim.simulate(&settings.truth, &out.checkpoint.xi_star, &mut obs_rng);
        history.push((out.checkpoint.xi_star.clone(), observed.clone()));

        let posterior = mcmc_posterior(&flow, &history, sim, &settings.mcmc, seed, round)
            .map_err(|source| TrainError::Inference { round, source })?;
        pool = crate::inference::pool_from_posterior(&posterior, settings.pool_size, seed, round);

        rounds.push(BoedRound {
            round,
            checkpoint: out.checkpoint,
            record: out.record,
            observed,
            posterior_mean: posterior.mean(),
            posterior_sd: posterior.sd(),
            posterior,
        });
    }

    Ok(BoedRunResult { rounds, flow, history })
}

/// Pool of prior draws (round 1).
pub fn prior_pool(sim: &dyn Simulator, size: usize, seed: u64, round: u64) -> Tensor {
    let dth = sim.theta_dim();
    let mut data = Vec::with_capacity(size * dth);
    for i in 0..size {
        let mut rng = module_stream(seed, StreamId::ThetaPool, &[round, i as u64]);
        data.extend_from_slice(&sim.prior_sample(&mut rng));
    }
    Tensor::matrix(size, dth, data)
}
