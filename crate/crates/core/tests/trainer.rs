//! Driver behavior: frozen-optimizer identities, determinism, checkpoint
//! invariants, design optimality on the oracle, and the sequential loop.

use infodesign_core::design::{
    prior_pool, run_sbi_boed, standardized_flow_config, train_round, BoedSettings, DesignMode,
    TrainSettings,
};
use infodesign_core::flow::{ConditionalFlow, FlowConfig};
use infodesign_core::inference::McmcConfig;
use infodesign_core::sim::{GaussOracle, LinearModel, SirModel, Simulator};

fn gauss_flow(sim: &dyn Simulator, design: Option<&[f64]>, seed: u64) -> ConditionalFlow {
    let base = FlowConfig::new(sim.y_dim(), sim.theta_dim(), sim.xi_dim())
        .with_arch(3, 2, 32, 4)
        .with_seed(seed);
    let config = standardized_flow_config(sim, base, design, 256, seed);
    ConditionalFlow::init(config).unwrap()
}

fn oracle_settings(steps: usize, seed: u64) -> TrainSettings {
    let mut s = TrainSettings::new(steps, 32, 31, 0.0, seed);
    s.lr = 2e-3;
    s.lr_xi = Some(0.02);
    s.mode = DesignMode::Distribution {
        sigma_start: 4.0,
        sigma_end: 0.3,
        decay_rate: 4.0,
        mu_init: None,
    };
    s
}

#[test]
fn zero_learning_rates_freeze_everything() {
    let sim = GaussOracle::default();
    let mut flow = gauss_flow(&sim, None, 1);
    let before = flow.flat_params();
    let pool = prior_pool(&sim, 256, 7, 1);
    let mut settings = oracle_settings(40, 7);
    settings.lr = 0.0;
    settings.lr_xi = Some(0.0);
    let out = train_round(&sim, &mut flow, &pool, &settings, 1).unwrap();

    assert_eq!(flow.flat_params(), before, "phi must not move");
    let (lo, hi) = sim.design_bounds();
    let mid = 0.5 * (lo[0] + hi[0]);
    assert_eq!(out.final_mu, vec![mid], "mu must not move");
    // Checkpoint equals the best of the random draws' step EIGs.
    let best = out.record.steps.iter().map(|s| s.eig).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.checkpoint.eig_star, best);
}

#[test]
fn fixed_seed_reproduces_the_run_record() {
    let sim = GaussOracle::default();
    let run = || {
        let mut flow = gauss_flow(&sim, None, 3);
        let pool = prior_pool(&sim, 128, 11, 1);
        let settings = oracle_settings(25, 11);
        train_round(&sim, &mut flow, &pool, &settings, 1).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.record.steps.len(), b.record.steps.len());
    for (x, y) in a.record.steps.iter().zip(&b.record.steps) {
        assert_eq!(x, y, "step rows must match bitwise");
    }
    assert_eq!(a.checkpoint.xi_star, b.checkpoint.xi_star);
    assert_eq!(a.checkpoint.flow_snapshot, b.checkpoint.flow_snapshot);
}

#[test]
fn checkpoint_is_the_running_maximum() {
    let sim = GaussOracle::default();
    let mut flow = gauss_flow(&sim, None, 5);
    let pool = prior_pool(&sim, 256, 13, 1);
    let settings = oracle_settings(60, 13);
    let out = train_round(&sim, &mut flow, &pool, &settings, 1).unwrap();
    let max_eig = out.record.steps.iter().map(|s| s.eig).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.checkpoint.eig_star, max_eig);
    // The flagged rows are exactly the strict improvements.
    let mut best = f64::NEG_INFINITY;
    for row in &out.record.steps {
        assert_eq!(row.checkpoint, row.eig > best);
        best = best.max(row.eig);
    }
    // The snapshot holds a loadable flow.
    let snap = ConditionalFlow::from_bytes(&out.checkpoint.flow_snapshot).unwrap();
    assert_eq!(snap.step(), out.checkpoint.step);
}

#[test]
fn oracle_design_optimization_reaches_the_boundary() {
    // MI is monotone in |xi| with bounds [-10, 10]; the driver must push the
    // checkpointed design to the edge.
    let sim = GaussOracle::default();
    let mut flow = gauss_flow(&sim, None, 9);
    let pool = prior_pool(&sim, 512, 17, 1);
    let settings = oracle_settings(1200, 17);
    let out = train_round(&sim, &mut flow, &pool, &settings, 1).unwrap();
    assert!(
        out.checkpoint.xi_star[0].abs() >= 9.0,
        "checkpoint design {} did not reach the boundary",
        out.checkpoint.xi_star[0]
    );
}

#[test]
fn plateau_annealing_reduces_lr_during_training() {
    let sim = GaussOracle::default();
    let mut flow = gauss_flow(&sim, None, 21);
    let pool = prior_pool(&sim, 128, 23, 1);
    let mut settings = oracle_settings(260, 23);
    settings.plateau = Some(infodesign_core::design::PlateauConfig {
        factor: 0.8,
        min_lr: 1e-4,
        patience: 40,
        window: 20,
    });
    let out = train_round(&sim, &mut flow, &pool, &settings, 1).unwrap();
    let last_lr = out.record.steps.last().unwrap().lr;
    assert!(last_lr <= settings.lr, "lr never annealed: {last_lr}");
    assert!(last_lr >= 1e-4);
}

#[test]
fn single_round_boed_reduces_to_train_round_plus_posterior() {
    let sim = GaussOracle::default();
    let flow = gauss_flow(&sim, None, 31);
    let settings = BoedSettings {
        rounds: 1,
        pool_size: 256,
        truth: vec![0.8],
        train: oracle_settings(60, 31),
        mcmc: McmcConfig::desk(2, 800, 1500),
    };
    let result = run_sbi_boed(&sim, flow, &settings).unwrap();
    assert_eq!(result.rounds.len(), 1);
    assert_eq!(result.history.len(), 1);
    let round = &result.rounds[0];
    assert_eq!(round.record.steps.len(), 60);
    assert!(round.posterior.samples.rows() > 0);
    assert_eq!(round.observed.len(), 1);
}

#[test]
fn sir_two_rounds_complete_with_positive_information() {
    let sim = SirModel::default();
    let base = FlowConfig::new(1, 2, 1).with_arch(3, 2, 32, 4).with_seed(41);
    let config = standardized_flow_config(&sim, base, None, 128, 41);
    let flow = ConditionalFlow::init(config).unwrap();
    let mut train = TrainSettings::new(120, 24, 23, 0.1, 41);
    train.lr = 2e-3;
    train.lr_xi = Some(0.05);
    train.mode = DesignMode::Distribution {
        sigma_start: 25.0,
        sigma_end: 1.0,
        decay_rate: 4.0,
        mu_init: None,
    };
    let settings = BoedSettings {
        rounds: 2,
        pool_size: 96,
        truth: vec![0.7399, 0.0924],
        train,
        mcmc: McmcConfig::desk(2, 600, 1000),
    };
    let result = run_sbi_boed(&sim, flow, &settings).unwrap();
    assert_eq!(result.rounds.len(), 2);
    for round in &result.rounds {
        assert!(
            round.checkpoint.eig_star > 0.0,
            "round {} EIG {}",
            round.round,
            round.checkpoint.eig_star
        );
        let (lo, hi) = sim.design_bounds();
        assert!(round.checkpoint.xi_star[0] >= lo[0] && round.checkpoint.xi_star[0] <= hi[0]);
    }
}

#[test]
fn sequential_rounds_contract_the_posterior() {
    // Linear 1D, two rounds: the slope coordinate's posterior sd shrinks
    // as observations accumulate (conjugate-style contraction).
    let sim = LinearModel::new(1);
    let mut contracted = 0;
    for seed in 0..5u64 {
        let base = FlowConfig::new(1, 2, 1).with_arch(3, 2, 32, 4).with_seed(seed);
        let config = standardized_flow_config(&sim, base, None, 256, seed);
        let flow = ConditionalFlow::init(config).unwrap();
        let mut train = TrainSettings::new(150, 24, 23, 0.0, 100 + seed);
        train.lr = 2e-3;
        train.lr_xi = Some(0.05);
        train.mode = DesignMode::Distribution {
            sigma_start: 4.0,
            sigma_end: 0.5,
            decay_rate: 4.0,
            mu_init: None,
        };
        let settings = BoedSettings {
            rounds: 2,
            pool_size: 128,
            truth: vec![1.0, -0.7],
            train,
            mcmc: McmcConfig::desk(2, 600, 1200),
        };
        let result = run_sbi_boed(&sim, flow, &settings).unwrap();
        let sd1 = result.rounds[0].posterior_sd[1];
        let sd2 = result.rounds[1].posterior_sd[1];
        if sd2 < sd1 {
            contracted += 1;
        }
    }
    assert!(contracted >= 4, "posterior contracted on {contracted}/5 seeds");
}

#[test]
fn designs_written_to_the_record_respect_bounds() {
    let sim = GaussOracle::default();
    let mut flow = gauss_flow(&sim, None, 51);
    let pool = prior_pool(&sim, 128, 53, 1);
    let mut settings = oracle_settings(80, 53);
    settings.lr_xi = Some(0.5); // aggressive, to slam into the bounds
    let out = train_round(&sim, &mut flow, &pool, &settings, 1).unwrap();
    let (lo, hi) = sim.design_bounds();
    for row in &out.record.steps {
        assert!(row.mu[0] >= lo[0] && row.mu[0] <= hi[0], "mu {} out of bounds", row.mu[0]);
    }
    assert!(out.checkpoint.xi_star[0] >= lo[0] && out.checkpoint.xi_star[0] <= hi[0]);
}
