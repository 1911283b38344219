use nalgebra::DVector;
use proptest::prelude::*;

use prefopt::dpo::{self, DpoSettings};
use prefopt::envgen::{
    make_bandit_instance, make_mdp_instance, sample_preferences, sample_trajectory_preferences, DatasetFile,
    InstanceConfig,
};
use prefopt::metrics::{self, LossKind, OracleParams};
use prefopt::{mdp, rlhf};

fn config(seed: u64) -> InstanceConfig {
    InstanceConfig {
        x: 8,
        y: 6,
        d_r: 3,
        d_p: 5,
        seed,
        ..InstanceConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // At the reference parameter every margin is zero: the loss is ln 2 for any β.
    #[test]
    fn dpo_loss_at_reference_is_ln2(seed in 0u64..1000, beta in 0.05f64..5.0) {
        let inst = make_bandit_instance(&config(seed)).unwrap();
        let data = sample_preferences(&inst, 32, seed + 1).unwrap();
        let (loss, grad) = dpo::dpo_loss_grad(&inst.mu.theta, &data, beta).unwrap();
        prop_assert!((loss - std::f64::consts::LN_2).abs() <= 1e-12);
        let mean_diff = data.psi_diff.row_mean().transpose();
        prop_assert!((grad + mean_diff * (beta / 2.0)).amax() <= 1e-12);
    }

    #[test]
    fn dataset_file_round_trip_keeps_losses(seed in 0u64..1000) {
        let inst = make_bandit_instance(&config(seed)).unwrap();
        let data = sample_preferences(&inst, 16, seed).unwrap();
        let json = serde_json::to_string(&DatasetFile::new(&data, seed)).unwrap();
        let back = serde_json::from_str::<DatasetFile>(&json).unwrap().to_dataset().unwrap();
        let theta = DVector::from_element(5, 0.3);
        prop_assert_eq!(
            dpo::dpo_loss_grad(&theta, &data, 0.7).unwrap(),
            dpo::dpo_loss_grad(&theta, &back, 0.7).unwrap()
        );
    }
}

#[test]
fn gradient_descent_reaches_oracle() {
    let inst = make_bandit_instance(&InstanceConfig { b_cap: 2.0, ..config(3) }).unwrap();
    let data = sample_preferences(&inst, 200, 4).unwrap();
    let params = |cap, beta| OracleParams { cap, beta, start: None };
    let mle_star = metrics::oracle_solve(LossKind::Mle, &data, &params(inst.config.f_cap, 0.0)).unwrap();
    let mle = rlhf::mle_pgd(&data, inst.config.f_cap, rlhf::default_mle_step(inst.config.f_cap), 5000, &DVector::zeros(3))
        .unwrap();
    assert!(mle.last().unwrap().loss - mle_star.loss <= 1e-8);

    let dpo_star = metrics::oracle_solve(LossKind::Dpo, &data, &params(2.0, 1.0)).unwrap();
    let settings = DpoSettings { beta: 1.0, b_cap: 2.0, eta: Some(0.5), iters: 20_000 };
    let run = dpo::dpo_pgd(&data, settings, &DVector::zeros(5), None).unwrap();
    let gap = run.last().unwrap().loss - dpo_star.loss;
    assert!(gap <= 1e-8, "gap {gap}");
}

#[test]
fn gibbs_policy_is_best_loglinear_on_nested_features() {
    let inst = make_bandit_instance(&config(7)).unwrap();
    let beta = inst.config.beta;
    let gibbs = rlhf::gibbs_policy(&inst.true_reward, &inst.mu_table, beta).unwrap().policy;
    let theta = metrics::loglinear_regularized_oracle(&inst.features, &inst.true_reward, &inst.mu_table, beta, &inst.rho, 1e3);
    let fitted = metrics::loglinear_table(&theta, &inst.features);
    assert!(fitted.max_abs_diff(&gibbs) <= 1e-6);
}

#[test]
fn trajectory_dpo_oracle_recovers_a_valid_occupancy() {
    let inst = make_mdp_instance(&InstanceConfig { x: 5, y: 3, d_r: 3, d_p: 4, ..InstanceConfig::default() }).unwrap();
    let data = sample_trajectory_preferences(&inst, 300, 9).unwrap();
    let star = metrics::oracle_solve(LossKind::DpoMdp, &data, &OracleParams { cap: 5.0, beta: 1.0, start: None }).unwrap();
    assert!(!star.precision_warning);
    let occ = mdp::loglinear_occupancy(&star.w, &inst.features).unwrap();
    let policy = mdp::policy_from_occupancy(&occ).unwrap();
    let implied = mdp::occupancy_of_policy(&policy, &inst.mdp).unwrap();
    assert!(implied.d.iter().all(|p| *p > 0.0));
    assert!((implied.d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}
