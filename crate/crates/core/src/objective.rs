//! Contrastive mutual-information objectives over a conditional density
//! model.
//!
//! All bounds share one batch layout: N anchor rows, each with its own
//! (theta0, y, xi), scored against L contrastive parameter draws. The
//! denominator of every ratio runs over the anchor plus the contrastive set,
//! so the per-row value is capped at log(L+1) up to Monte Carlo noise. The
//! regularized variants add (or fold in) a lambda-scaled anchor
//! log-likelihood; both groupings are implemented verbatim and agree per row
//! by the exponent identity p^(1+lambda) = p * p^lambda.

use rand::Rng;
use thiserror::Error;

use crate::ad::{Tape, Tensor, Var};
use crate::flow::{ConditionalFlow, CtxInput, FlowError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("non-finite log-density at batch row {row}")]
    NonFinite { row: usize },
    #[error("critic overflow at sample {index}")]
    CriticOverflow { index: usize },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// One step's contrastive batch.
///
/// `contrast` holds L parameter draws shared across the batch rows
/// (one fresh set per step), or N*L per-row draws when `per_row_contrast`
/// is set.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    /// [N, theta_dim] root parameter draws.
    pub theta0: Tensor,
    /// [L, theta_dim] shared draws, or [N*L, theta_dim] per-row draws.
    pub contrast: Tensor,
    pub per_row_contrast: bool,
    /// [N, y_dim] outcomes simulated under (theta0[i], xi[i]).
    pub y: Tensor,
    /// [N, xi_dim] designs; None for design-free tasks.
    pub xi: Option<Tensor>,
    pub lambda: f64,
}

impl ContrastiveBatch {
    pub fn rows(&self) -> usize {
        self.y.rows()
    }

    pub fn contrast_count(&self) -> usize {
        if self.per_row_contrast {
            if self.rows() == 0 {
                0
            } else {
                self.contrast.rows() / self.rows()
            }
        } else {
            self.contrast.rows()
        }
    }

    fn validate(&self) -> Result<(), ObjectiveError> {
        let n = self.rows();
        if n == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        if !self.lambda.is_finite() {
            return Err(ObjectiveError::InvalidBatch("lambda must be finite".into()));
        }
        if self.theta0.rows() != n {
            return Err(ObjectiveError::InvalidBatch(format!(
                "theta0 has {} rows, y has {n}",
                self.theta0.rows()
            )));
        }
        if let Some(xi) = &self.xi {
            if xi.rows() != n {
                return Err(ObjectiveError::InvalidBatch(format!(
                    "xi has {} rows, y has {n}",
                    xi.rows()
                )));
            }
        }
        if self.per_row_contrast && self.contrast.rows() % n != 0 {
            return Err(ObjectiveError::InvalidBatch(
                "per-row contrastive draws must be a multiple of the batch size".into(),
            ));
        }
        if self.contrast.rows() > 0 && self.contrast.cols() != self.theta0.cols() {
            return Err(ObjectiveError::InvalidBatch(
                "contrastive draws and theta0 disagree on dimension".into(),
            ));
        }
        Ok(())
    }
}

/// Which grouping of the regularizer to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain contrastive ratio; lambda ignored.
    Nce,
    /// Ratio plus lambda * anchor log-likelihood.
    NceLambda,
    /// Anchor scaled by (1 + lambda) inside the ratio.
    InfoNceLambda,
}

/// Monte Carlo estimate of a contrastive bound.
#[derive(Debug, Clone)]
pub struct MIEstimate {
    /// Mean of per_row, in nats.
    pub value: f64,
    pub per_row: Vec<f64>,
    /// log(L + 1).
    pub bound_cap: f64,
    pub lambda_used: f64,
}

impl MIEstimate {
    /// Standard error of the batch mean.
    pub fn standard_error(&self) -> f64 {
        let n = self.per_row.len();
        if n < 2 {
            return f64::INFINITY;
        }
        let mean = self.value;
        let var =
            self.per_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// Nodes produced by [`contrastive_graph`].
pub struct ContrastiveGraph {
    /// Scalar mean over rows.
    pub value: Var,
    /// Per-row bound values, [N].
    pub per_row: Var,
    /// Anchor log-likelihood column, [N].
    pub anchor: Var,
    /// Row-wise logsumexp over all L+1 log-densities, [N].
    pub lse: Var,
    /// Row-wise logsumexp over the contrastive block only (None when L = 0).
    pub contrast_lse: Option<Var>,
}

/// Assemble the contrastive objective on an existing tape.
///
/// `theta0_node`/`xi_node` override the batch's constant tensors with live
/// tape nodes so gradients can flow to them (designs through the
/// reparameterized sampler, theta for gradient checks). The density is
/// evaluated once on the flattened [N*(L+1)] pairing and reshaped.
pub fn contrastive_graph<F>(
    tape: &mut Tape,
    batch: &ContrastiveBatch,
    variant: Variant,
    theta0_node: Option<Var>,
    xi_node: Option<Var>,
    log_prob: F,
) -> Result<ContrastiveGraph, ObjectiveError>
where
    F: FnOnce(&mut Tape, &Tensor, Var, Option<Var>) -> Result<Var, ObjectiveError>,
{
    batch.validate()?;
    let n = batch.rows();
    let l = batch.contrast_count();
    let dy = batch.y.cols();
    let rows = n * (l + 1);

    // Anchor outcomes repeated across the L+1 density evaluations.
    let mut y_big = Vec::with_capacity(rows * dy);
    for i in 0..n {
        for _ in 0..=l {
            y_big.extend_from_slice(&batch.y.data()[i * dy..(i + 1) * dy]);
        }
    }
    let y_big = Tensor::matrix(rows, dy, y_big);

    // theta rows: anchor block first, then the contrastive block.
    let theta0 = match theta0_node {
        Some(v) => v,
        None => tape.constant(batch.theta0.clone()),
    };
    let theta_all = if l > 0 {
        let contrast = tape.constant(batch.contrast.clone());
        tape.concat_rows(theta0, contrast)
    } else {
        theta0
    };
    let mut theta_idx = Vec::with_capacity(rows);
    for i in 0..n {
        theta_idx.push(i);
        for k in 0..l {
            let idx = if batch.per_row_contrast { n + i * l + k } else { n + k };
            theta_idx.push(idx);
        }
    }
    let theta_big = tape.gather_rows(theta_all, &theta_idx);

    let xi_big = match (&batch.xi, xi_node) {
        (None, None) => None,
        (maybe_const, node) => {
            let xi = match node {
                Some(v) => v,
                None => tape.constant(
                    maybe_const
                        .as_ref()
                        .ok_or_else(|| {
                            ObjectiveError::InvalidBatch("xi node given without xi batch dims".into())
                        })?
                        .clone(),
                ),
            };
            let mut xi_idx = Vec::with_capacity(rows);
            for i in 0..n {
                for _ in 0..=l {
                    xi_idx.push(i);
                }
            }
            Some(tape.gather_rows(xi, &xi_idx))
        }
    };

    let lp_all = log_prob(tape, &y_big, theta_big, xi_big)?;
    if let Err(crate::ad::AdError::NonFinite { elem, .. }) = tape.check_finite(lp_all) {
        return Err(ObjectiveError::NonFinite { row: elem / (l + 1) });
    }

    let m = tape.reshape(lp_all, &[n, l + 1]);
    let anchor_col = tape.slice_cols(m, 0, 1);
    let anchor = tape.reshape(anchor_col, &[n]);
    let lse = tape.logsumexp_rows(m);
    let contrast_lse = if l > 0 {
        let mc = tape.slice_cols(m, 1, l + 1);
        Some(tape.logsumexp_rows(mc))
    } else {
        None
    };
    let cap = ((l + 1) as f64).ln();

    let per_row = match variant {
        Variant::Nce => {
            let ratio = tape.sub(anchor, lse);
            tape.offset(ratio, cap)
        }
        Variant::NceLambda => {
            let ratio = tape.sub(anchor, lse);
            let base = tape.offset(ratio, cap);
            let reg = tape.scale(anchor, batch.lambda);
            tape.add(base, reg)
        }
        Variant::InfoNceLambda => {
            let scaled = tape.scale(anchor, 1.0 + batch.lambda);
            let ratio = tape.sub(scaled, lse);
            tape.offset(ratio, cap)
        }
    };
    let value = tape.mean(per_row);
    Ok(ContrastiveGraph { value, per_row, anchor, lse, contrast_lse })
}

fn estimate_from(
    tape: &Tape,
    graph: &ContrastiveGraph,
    batch: &ContrastiveBatch,
    lambda: f64,
) -> MIEstimate {
    MIEstimate {
        value: tape.value(graph.value).item(),
        per_row: tape.value(graph.per_row).data().to_vec(),
        bound_cap: ((batch.contrast_count() + 1) as f64).ln(),
        lambda_used: lambda,
    }
}

/// Closure evaluating a flow's log-density for the assembled pairing.
pub fn flow_closure<'a>(
    flow: &'a ConditionalFlow,
    vars: &'a crate::flow::FlowVars,
) -> impl FnOnce(&mut Tape, &Tensor, Var, Option<Var>) -> Result<Var, ObjectiveError> + 'a {
    move |tape, y, theta, xi| {
        flow.log_prob_graph(tape, vars, y, Some(CtxInput::Node(theta)), xi.map(CtxInput::Node))
            .map_err(ObjectiveError::from)
    }
}

/// Evaluate one variant against a flow without keeping gradients.
fn evaluate(
    flow: &ConditionalFlow,
    batch: &ContrastiveBatch,
    variant: Variant,
) -> Result<MIEstimate, ObjectiveError> {
    let mut tape = Tape::new();
    let vars = flow.bind(&mut tape, false);
    let graph =
        contrastive_graph(&mut tape, batch, variant, None, None, flow_closure(flow, &vars))?;
    let lambda = if variant == Variant::Nce { 0.0 } else { batch.lambda };
    Ok(estimate_from(&tape, &graph, batch, lambda))
}

/// Plain contrastive bound (lambda ignored).
pub fn nce_loss(
    flow: &ConditionalFlow,
    batch: &ContrastiveBatch,
) -> Result<MIEstimate, ObjectiveError> {
    evaluate(flow, batch, Variant::Nce)
}

/// Contrastive bound plus lambda-weighted anchor log-likelihood.
pub fn nce_lambda_loss(
    flow: &ConditionalFlow,
    batch: &ContrastiveBatch,
) -> Result<MIEstimate, ObjectiveError> {
    evaluate(flow, batch, Variant::NceLambda)
}

/// Regularized estimator with the anchor scaled by (1 + lambda).
pub fn info_nce_lambda(
    flow: &ConditionalFlow,
    batch: &ContrastiveBatch,
) -> Result<MIEstimate, ObjectiveError> {
    evaluate(flow, batch, Variant::InfoNceLambda)
}

/// Per-design information gain for a batch whose designs were drawn from the
/// design distribution: `per_row[i]` is the EIG attributed to design i, and
/// `value` the round's scalar EIG.
pub fn eig_per_design(
    flow: &ConditionalFlow,
    design_batch: &ContrastiveBatch,
) -> Result<MIEstimate, ObjectiveError> {
    evaluate(flow, design_batch, Variant::InfoNceLambda)
}

/// Same estimators for any closure-backed density (analytic oracles in tests
/// substitute the exact likelihood here).
pub fn estimate_with<F>(
    batch: &ContrastiveBatch,
    variant: Variant,
    log_prob: F,
) -> Result<MIEstimate, ObjectiveError>
where
    F: FnOnce(&mut Tape, &Tensor, Var, Option<Var>) -> Result<Var, ObjectiveError>,
{
    let mut tape = Tape::new();
    let graph = contrastive_graph(&mut tape, batch, variant, None, None, log_prob)?;
    let lambda = if variant == Variant::Nce { 0.0 } else { batch.lambda };
    Ok(estimate_from(&tape, &graph, batch, lambda))
}

/// Mean log-likelihood of a held-out batch. The batch must never have been
/// used for gradient updates.
pub fn validation_loglik(
    flow: &ConditionalFlow,
    y: &Tensor,
    theta: Option<&Tensor>,
    xi: Option<&Tensor>,
) -> Result<f64, ObjectiveError> {
    if y.rows() == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    let lp = flow.log_prob_values(y, theta, xi)?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

/// One (y, theta, xi) triple for the NWJ estimator.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub y: Vec<f64>,
    pub theta: Vec<f64>,
    pub xi: Option<Vec<f64>>,
}

/// NWJ lower bound: E_joint[critic] - e^{-1} E_marginal[exp(critic)].
///
/// Marginal samples pair outcomes with parameters drawn independently
/// (shuffled joints; see [`shuffled_marginals`]).
pub fn nwj_bound<F>(
    critic: F,
    joint: &[PairSample],
    marginal: &[PairSample],
) -> Result<f64, ObjectiveError>
where
    F: Fn(&[f64], &[f64], Option<&[f64]>) -> f64,
{
    if joint.is_empty() || marginal.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let mut joint_mean = 0.0;
    for s in joint {
        joint_mean += critic(&s.y, &s.theta, s.xi.as_deref());
    }
    joint_mean /= joint.len() as f64;

    let mut marg_mean = 0.0;
    for (i, s) in marginal.iter().enumerate() {
        let e = critic(&s.y, &s.theta, s.xi.as_deref()).exp();
        if !e.is_finite() {
            return Err(ObjectiveError::CriticOverflow { index: i });
        }
        marg_mean += e;
    }
    marg_mean /= marginal.len() as f64;
    Ok(joint_mean - (-1.0f64).exp() * marg_mean)
}

/// All ordered cross pairings (y_i, theta_j), i != j: the N(N-1) marginal
/// samples obtained by shuffling theta against y.
pub fn shuffled_marginals(joint: &[PairSample]) -> Vec<PairSample> {
    let n = joint.len();
    let mut out = Vec::with_capacity(n.saturating_sub(1) * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            out.push(PairSample {
                y: joint[i].y.clone(),
                theta: joint[j].theta.clone(),
                xi: joint[i].xi.clone(),
            });
        }
    }
    out
}

/// Draw a contrastive batch from a simulator prior at fixed designs.
/// Outcome i is simulated under (theta0[i], xi[i]); the shared contrastive
/// set is independent of every outcome.
pub fn sample_prior_batch(
    sim: &dyn crate::sim::Simulator,
    xi: Option<&Tensor>,
    n: usize,
    l: usize,
    lambda: f64,
    seed: u64,
    tag: u64,
) -> ContrastiveBatch {
    use crate::rng::{module_stream, StreamId};
    let dth = sim.theta_dim();
    let mut theta0 = Vec::with_capacity(n * dth);
    let mut y = Vec::with_capacity(n * sim.y_dim());
    for i in 0..n {
        let mut rng = module_stream(seed, StreamId::ThetaPool, &[tag, i as u64]);
        let th = sim.prior_sample(&mut rng);
        let xrow: Vec<f64> = match xi {
            Some(x) => (0..x.cols()).map(|c| x.get2(i, c)).collect(),
            None => vec![],
        };
        let mut sim_rng = module_stream(seed, StreamId::Simulator, &[tag, i as u64]);
        let out = sim.simulate(&th, &xrow, &mut sim_rng);
        theta0.extend_from_slice(&th);
        y.extend_from_slice(&out);
    }
    let mut contrast = Vec::with_capacity(l * dth);
    let mut crng = module_stream(seed, StreamId::Contrastive, &[tag]);
    for _ in 0..l {
        contrast.extend_from_slice(&sim.prior_sample(&mut crng));
    }
    ContrastiveBatch {
        theta0: Tensor::matrix(n, dth, theta0),
        contrast: Tensor::matrix(l, dth, contrast),
        per_row_contrast: false,
        y: Tensor::matrix(n, sim.y_dim(), y),
        xi: xi.cloned(),
        lambda,
    }
}

/// Resample rows (with replacement) from a pool of parameter draws.
pub fn resample_pool(pool: &Tensor, count: usize, rng: &mut impl Rng) -> Tensor {
    let n = pool.rows();
    assert!(n > 0, "empty theta pool");
    let d = pool.cols();
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        let i = rng.random_range(0..n);
        out.extend_from_slice(&pool.data()[i * d..(i + 1) * d]);
    }
    Tensor::matrix(count, d, out)
}
