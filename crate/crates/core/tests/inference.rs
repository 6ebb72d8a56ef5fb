//! MCMC and calibration behavior against conjugate oracles.

use infodesign_core::flow::{ConditionalFlow, FlowConfig};
use infodesign_core::inference::{
    chi_square_uniform, mcmc_posterior, mcmc_sample, sbc_coverage, surrogate_log_target,
    CoverageCurve, InferenceError, McmcConfig, PosteriorHook, SbcSettings,
};
use infodesign_core::sim::{GaussOracle, Simulator};

fn identity_flow() -> ConditionalFlow {
    ConditionalFlow::init(FlowConfig::new(1, 1, 1).with_arch(2, 1, 8, 4)).unwrap()
}

#[test]
fn standard_normal_target_moments() {
    // Detailed-balance smoke test on a 1D standard normal.
    let oracle = GaussOracle::default();
    let config =
        McmcConfig { chains: 4, warmup: 4_000, draws_per_chain: 1_200_000, ..Default::default() };
    let target = |theta: &[f64]| -> Result<f64, InferenceError> { Ok(-0.5 * theta[0] * theta[0]) };
    let set = mcmc_sample(&target, &oracle, &config, 11, 0, 0).unwrap();
    let ess = set.ess[0];
    assert!(ess > 100_000.0, "effective draws {ess}");
    let mean = set.mean()[0];
    let sd = set.sd()[0];
    let se_mean = 1.0 / ess.sqrt();
    assert!(mean.abs() < 3.0 * se_mean, "mean {mean} vs 3 SE {}", 3.0 * se_mean);
    let var = sd * sd;
    assert!((0.9..=1.1).contains(&var), "variance {var}");
    assert!((0.2..=0.45).contains(&set.acceptance), "acceptance {}", set.acceptance);
    assert!(!set.rhat_flagged(), "rhat {:?}", set.rhat);
}

#[test]
fn conjugate_posterior_recovery() {
    // Analytic Gaussian likelihood substituted for the surrogate.
    let oracle = GaussOracle::default();
    let history = [(2.0, 1.5), (1.0, -0.3)];
    let (want_mean, want_var) = oracle.conjugate_posterior(&history);

    let target = {
        let oracle = oracle.clone();
        move |theta: &[f64]| -> Result<f64, InferenceError> {
            let lik: f64 =
                history.iter().map(|&(xi, y)| oracle.log_likelihood(y, theta[0], xi)).sum();
            Ok(lik + oracle.prior_log_density(theta))
        }
    };
    let config = McmcConfig { chains: 4, warmup: 3_000, draws_per_chain: 10_000, ..Default::default() };
    let set = mcmc_sample(&target, &oracle, &config, 13, 0, history.len()).unwrap();

    let ess = set.ess[0].max(100.0);
    let mean = set.mean()[0];
    let sd = set.sd()[0];
    let se_mean = want_var.sqrt() / ess.sqrt();
    assert!((mean - want_mean).abs() < 3.0 * se_mean, "mean {mean} vs {want_mean} (se {se_mean})");
    let se_var = want_var * (2.0 / ess).sqrt();
    assert!((sd * sd - want_var).abs() < 3.0 * se_var, "var {} vs {want_var}", sd * sd);
    assert!(!set.rhat_flagged());
}

#[test]
fn empty_history_reproduces_the_prior() {
    let oracle = GaussOracle::default();
    let flow = identity_flow();
    let config = McmcConfig { chains: 4, warmup: 2_000, draws_per_chain: 10_000, ..Default::default() };
    let set = mcmc_posterior(&flow, &[], &oracle, &config, 17, 0).unwrap();
    let ess = set.ess[0].max(100.0);
    let mean = set.mean()[0];
    let sd = set.sd()[0];
    assert!(mean.abs() < 3.0 / ess.sqrt(), "prior mean {mean}");
    assert!((sd - 1.0).abs() < 3.0 * (0.5 / ess).sqrt() + 0.02, "prior sd {sd}");
}

#[test]
fn product_likelihood_factorizes() {
    let oracle = GaussOracle::default();
    let flow = identity_flow();
    let h1 = vec![(vec![1.5], vec![0.7])];
    let h2 = vec![(vec![-0.5], vec![1.1])];
    let both = vec![h1[0].clone(), h2[0].clone()];
    let theta = [0.4];
    let t_both = surrogate_log_target(&flow, &both, &oracle, &theta).unwrap();
    let t1 = surrogate_log_target(&flow, &h1, &oracle, &theta).unwrap();
    let t2 = surrogate_log_target(&flow, &h2, &oracle, &theta).unwrap();
    let prior = oracle.prior_log_density(&theta);
    assert!(
        (t_both - (t1 + t2 - prior)).abs() < 1e-10,
        "{t_both} vs {}",
        t1 + t2 - prior
    );
}

#[test]
fn step_size_pathology_is_reported() {
    // No warm-up plus an absurd initial step: every proposal lands
    // astronomically far out and is rejected.
    let oracle = GaussOracle::default();
    let target = |theta: &[f64]| -> Result<f64, InferenceError> { Ok(-0.5 * theta[0] * theta[0]) };
    let config = McmcConfig {
        chains: 1,
        warmup: 0,
        draws_per_chain: 200,
        initial_step: 1e280,
        ..Default::default()
    };
    let err = mcmc_sample(&target, &oracle, &config, 19, 0, 0).unwrap_err();
    assert!(matches!(err, InferenceError::AllRejected { .. }), "{err}");
}

#[test]
fn sbc_exact_posterior_stays_in_band_and_ranks_are_uniform() {
    let oracle = GaussOracle::default();
    let settings = SbcSettings { trials: 200, draws_per_trial: 2_000, ..Default::default() };
    let curve = sbc_coverage(
        &oracle,
        &[2.0],
        &PosteriorHook::ExactConjugate(&oracle),
        &settings,
        41,
    )
    .unwrap();
    assert_eq!(curve.trials, 200);
    assert_eq!(curve.failures, 0);
    assert!(curve.is_monotone());
    assert!(curve.inside_band(), "coverage {:?}", curve.coverage);

    let (stat, p) = chi_square_uniform(&curve.ranks[0], settings.draws_per_trial, 20);
    assert!(p > 0.01, "ranks not uniform: chi2 {stat}, p {p}");
}

#[test]
fn sbc_blind_spot_and_underdispersion_detection() {
    // Replacing the posterior with the prior (likelihood ignored) leaves the
    // expected-coverage curve exactly diagonal: ranks of a prior draw among
    // prior draws are uniform no matter how informative the simulator is.
    // Marginal SBC cannot see this failure mode; direction-of-bias hooks can.
    let oracle = GaussOracle::default();
    let settings = SbcSettings { trials: 200, draws_per_trial: 2_000, ..Default::default() };
    let curve = sbc_coverage(&oracle, &[3.0], &PosteriorHook::PriorOnly, &settings, 29).unwrap();
    assert!(curve.inside_band(), "prior-as-posterior is SBC-calibrated by construction");

    // An under-dispersed posterior (variance deflated 4x) is detected below
    // the diagonal at mid levels.
    let narrow = sbc_coverage(
        &oracle,
        &[2.0],
        &PosteriorHook::VarianceInflated(&oracle, 0.25),
        &settings,
        29,
    )
    .unwrap();
    assert!(!narrow.inside_band(), "under-dispersed posterior must leave the band");
    for (l, c) in narrow.levels.iter().zip(&narrow.coverage) {
        if (0.3..=0.7).contains(l) {
            assert!(c < l, "level {l}: coverage {c} not below diagonal");
        }
    }
}

#[test]
fn sbc_variance_inflation_is_conservative() {
    let oracle = GaussOracle::default();
    let settings = SbcSettings { trials: 200, draws_per_trial: 500, ..Default::default() };
    let curve = sbc_coverage(
        &oracle,
        &[2.0],
        &PosteriorHook::VarianceInflated(&oracle, 4.0),
        &settings,
        31,
    )
    .unwrap();
    // Conservative posteriors sit above the diagonal at mid levels.
    for (l, c) in curve.levels.iter().zip(&curve.coverage) {
        if (0.3..=0.7).contains(l) {
            assert!(c > l, "level {l}: coverage {c} not above diagonal");
        }
    }
}

#[test]
fn informative_observations_contract_the_posterior() {
    let oracle = GaussOracle::default();
    let mut contracted = 0;
    for seed in 0..5u64 {
        let target_for = |history: Vec<(f64, f64)>| {
            let oracle = oracle.clone();
            move |theta: &[f64]| -> Result<f64, InferenceError> {
                let lik: f64 =
                    history.iter().map(|&(xi, y)| oracle.log_likelihood(y, theta[0], xi)).sum();
                Ok(lik + oracle.prior_log_density(theta))
            }
        };
        let config = McmcConfig { chains: 2, warmup: 1_500, draws_per_chain: 4_000, ..Default::default() };
        let one = target_for(vec![(2.0, 1.0)]);
        let two = target_for(vec![(2.0, 1.0), (2.0, 0.8)]);
        let set1 = mcmc_sample(&one, &oracle, &config, 100 + seed, 0, 1).unwrap();
        let set2 = mcmc_sample(&two, &oracle, &config, 200 + seed, 0, 2).unwrap();
        // Noise band: allow MC slack of 10% on the determinant.
        if set2.covariance_det() <= set1.covariance_det() * 1.1 {
            contracted += 1;
        }
    }
    assert!(contracted >= 4, "contraction on {contracted}/5 seeds");
}

#[test]
fn coverage_band_is_the_usual_binomial_band() {
    let curve = CoverageCurve {
        levels: vec![0.5],
        coverage: vec![0.5],
        trials: 200,
        failures: 0,
        ranks: vec![],
        draws_per_trial: 100,
    };
    let (lo, hi) = curve.binomial_band(0.5);
    let se = (0.5f64 * 0.5 / 200.0).sqrt();
    assert!((lo - (0.5 - 1.96 * se)).abs() < 1e-12);
    assert!((hi - (0.5 + 1.96 * se)).abs() < 1e-12);
}
