//! Likelihood-free experimental design built on a conditional spline-flow
//! likelihood surrogate.
//!
//! The crate trains a normalizing-flow likelihood `p(y | theta, xi)` with
//! contrastive mutual-information objectives while simultaneously optimizing
//! the experiment design `xi` through a truncated-normal design distribution.
//! The pieces:
//!
//! - [`ad`]: reverse-mode automatic differentiation over dense tensors.
//! - [`flow`]: conditional rational-quadratic spline flow with exact
//!   log-density and pathwise sampling.
//! - [`objective`]: contrastive MI lower bounds and their gradients.
//! - [`sim`]: simulators (noisy linear, SIR epidemic, two moons) plus a
//!   linear-Gaussian oracle with closed-form mutual information.
//! - [`design`]: the sequential design-optimization driver (design
//!   distribution, Adam updates, design checkpoints, run records).
//! - [`inference`]: MCMC posterior sampling from the surrogate and
//!   calibration/accuracy diagnostics.
//! - [`config`]: run configuration, per-task defaults, run manifests.

pub mod ad;
pub mod config;
pub mod design;
pub mod flow;
pub mod inference;
pub mod objective;
pub mod report;
pub mod rng;
pub mod sim;
