use infodesign_core::design::{prior_pool, train_round, DesignMode, TrainSettings, standardized_flow_config};
use infodesign_core::flow::{ConditionalFlow, FlowConfig};
use infodesign_core::sim::{GaussOracle, Simulator};

fn main() {
    let sim = GaussOracle::default();
    let base = FlowConfig::new(1, 1, 1).with_arch(3, 2, 32, 4).with_seed(9);
    let config = standardized_flow_config(&sim, base, None, 256, 9);
    println!("y std: shift {:?} scale {:?}", config.y_shift, config.y_scale);
    let mut flow = ConditionalFlow::init(config).unwrap();
    let pool = prior_pool(&sim, 512, 17, 1);
    let mut settings = TrainSettings::new(600, 32, 31, 0.0, 17);
    settings.lr = 2e-3;
    settings.lr_xi = Some(0.02);
    settings.mode = DesignMode::Distribution { sigma_start: 4.0, sigma_end: 0.3, decay_rate: 4.0, mu_init: None };
    let out = train_round(&sim, &mut flow, &pool, &settings, 1).unwrap();
    for row in out.record.steps.iter().step_by(40) {
        println!("step {:4} loss {:+.4} eig {:+.4} sigma {:.3} mu {:+.4} gxi {:.5} gphi {:.3}",
            row.step, row.loss, row.eig, row.sigma, row.mu[0], row.grad_norm_xi, row.grad_norm_phi);
    }
    println!("final mu {:+.4} ckpt xi {:+.4} eig* {:.4}", out.final_mu[0], out.checkpoint.xi_star[0], out.checkpoint.eig_star);
}
