//! Verification suites: each check records a measured value against a threshold.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::domain::{values, TabularPolicy};
use crate::dpo::{dpo_loss_grad, dpo_mdp_loss_grad, dpo_offsets, lipschitz_grad, lipschitz_loss, max_offset};
use crate::envgen::{
    make_bandit_instance, make_mdp_instance, sample_preferences, sample_trajectory_preferences, BanditInstance,
    InstanceConfig, MdpInstance,
};
use crate::error::{Error, Result};
use crate::mdp;
use crate::metrics::{
    loglinear_table, mle_smoothness, rate_fit, s_r, tabular_regularized_oracle, RateModel,
};
use crate::rlhf::{
    default_mle_step, gibbs_policy, h_matrix, mle_loss_grad, mle_pgd, npg_run, population_objective_grad,
    NpgSettings,
};
use crate::rng::{derive_seed, stream, stream_rng};

pub const SUITES: [&str; 5] = ["gradients", "constants", "spectra", "mdp", "rates"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub suite: String,
    pub property: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub entries: Vec<CheckEntry>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&CheckEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }

    fn at_most(&mut self, suite: &str, property: &str, measured: f64, threshold: f64) {
        self.entries.push(CheckEntry {
            suite: suite.into(),
            property: property.into(),
            measured,
            threshold,
            pass: measured <= threshold,
        });
    }

    fn at_least(&mut self, suite: &str, property: &str, measured: f64, threshold: f64) {
        self.entries.push(CheckEntry {
            suite: suite.into(),
            property: property.into(),
            measured,
            threshold,
            pass: measured >= threshold,
        });
    }

    /// Records a failed entry for a check that could not run.
    fn errored(&mut self, suite: &str, property: &str, err: &Error) {
        self.entries.push(CheckEntry {
            suite: suite.into(),
            property: format!("{property}: {err}"),
            measured: f64::NAN,
            threshold: f64::NAN,
            pass: false,
        });
    }
}

/// Builds the block Hessian of the log-partition over some contexts.
pub type HBuilder = dyn Fn(&TabularPolicy, &[usize]) -> DMatrix<f64>;

/// Runs one suite by name, or all of them.
pub fn run_suite(name: &str, seed: u64) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let names: Vec<&str> = match name {
        "all" => SUITES.to_vec(),
        s if SUITES.contains(&s) => vec![s],
        other => return Err(Error::Config(format!("unknown suite {other}"))),
    };
    for s in names {
        match s {
            "gradients" => gradients(&mut report, seed),
            "constants" => constants(&mut report, seed),
            "spectra" => spectra(&mut report, seed, &h_matrix),
            "mdp" => mdp_suite(&mut report, seed),
            _ => rates(&mut report, seed),
        }
    }
    Ok(report)
}

const FD_POINTS: usize = 20;
const FD_STEP: f64 = 1e-5;
const FD_TOLERANCE: f64 = 1e-6;

fn small_bandit(seed: u64) -> Result<BanditInstance> {
    make_bandit_instance(&InstanceConfig {
        x: 6,
        y: 5,
        d_r: 3,
        d_p: 4,
        seed,
        ..InstanceConfig::default()
    })
}

fn small_mdp(seed: u64) -> Result<MdpInstance> {
    make_mdp_instance(&InstanceConfig {
        x: 4,
        y: 3,
        d_r: 3,
        d_p: 4,
        gamma: 0.5,
        seed,
        ..InstanceConfig::default()
    })
}

/// Four contexts with three actions each; `d_P = 12` gives `Ψ_n` full column rank on all contexts.
pub fn full_rank_config(seed: u64) -> InstanceConfig {
    InstanceConfig {
        x: 4,
        y: 3,
        d_r: 3,
        d_p: 12,
        feature_mode: crate::envgen::FeatureMode::Generic,
        seed,
        ..InstanceConfig::default()
    }
}

fn random_ball_point(rng: &mut impl Rng, d: usize, radius: f64) -> DVector<f64> {
    let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    v * (radius * rng.random::<f64>() / (d as f64).sqrt())
}

/// Largest relative error between `grad(w)` and a central difference of `value` over random points.
fn fd_error(
    d: usize,
    radius: f64,
    seed: u64,
    f: impl Fn(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
) -> Result<f64> {
    let mut rng = stream_rng(seed, stream::PROBE);
    let mut worst: f64 = 0.0;
    for _ in 0..FD_POINTS {
        let w = random_ball_point(&mut rng, d, radius);
        let (_, g) = f(&w)?;
        let mut fd = DVector::zeros(d);
        for k in 0..d {
            let mut hi = w.clone();
            let mut lo = w.clone();
            hi[k] += FD_STEP;
            lo[k] -= FD_STEP;
            fd[k] = (f(&hi)?.0 - f(&lo)?.0) / (2.0 * FD_STEP);
        }
        worst = worst.max((&g - &fd).norm() / g.norm().max(fd.norm()).max(1e-3));
    }
    Ok(worst)
}

fn record<T>(report: &mut VerifyReport, suite: &str, property: &str, r: Result<T>, apply: impl FnOnce(&mut VerifyReport, T)) {
    match r {
        Ok(v) => apply(report, v),
        Err(e) => report.errored(suite, property, &e),
    }
}

fn gradients(report: &mut VerifyReport, seed: u64) {
    const S: &str = "gradients";
    let bandit = small_bandit(seed).and_then(|inst| {
        let data = sample_preferences(&inst, 40, derive_seed(&[seed, 40]))?;
        Ok((inst, data))
    });
    let (inst, data) = match bandit {
        Ok(v) => v,
        Err(e) => return report.errored(S, "bandit instance", &e),
    };
    let seed_fd = derive_seed(&[seed, 1]);
    record(report, S, "mle_loss_fd_relative_error", fd_error(3, 1.0, seed_fd, |w| mle_loss_grad(w, &data)), |r, v| {
        r.at_most(S, "mle_loss_fd_relative_error", v, FD_TOLERANCE)
    });
    record(report, S, "dpo_loss_fd_relative_error", fd_error(4, 2.0, seed_fd, |w| dpo_loss_grad(w, &data, 1.0)), |r, v| {
        r.at_most(S, "dpo_loss_fd_relative_error", v, FD_TOLERANCE)
    });
    let objective = |w: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        Ok(population_objective_grad(w, &inst.features, &inst.true_reward, &inst.mu_table, 0.7, &inst.rho))
    };
    record(report, S, "regularized_objective_fd_relative_error", fd_error(4, 2.0, seed_fd, objective), |r, v| {
        r.at_most(S, "regularized_objective_fd_relative_error", v, FD_TOLERANCE)
    });
    let mdp_case = small_mdp(seed).and_then(|inst| {
        let data = sample_trajectory_preferences(&inst, 30, derive_seed(&[seed, 30]))?;
        let d = inst.features.d_m();
        fd_error(d, 2.0, seed_fd, |w| dpo_mdp_loss_grad(w, &data, 0.8))
    });
    record(report, S, "mdp_dpo_loss_fd_relative_error", mdp_case, |r, v| {
        r.at_most(S, "mdp_dpo_loss_fd_relative_error", v, FD_TOLERANCE)
    });
}

fn constants(report: &mut VerifyReport, seed: u64) {
    const S: &str = "constants";
    report.at_most(S, "s_r_at_zero_is_quarter", (s_r(0.0) - 0.25).abs(), 1e-15);
    let case = small_bandit(seed).and_then(|inst| {
        let data = sample_preferences(&inst, 60, derive_seed(&[seed, 60]))?;
        Ok((inst, data))
    });
    let (inst, data) = match case {
        Ok(v) => v,
        Err(e) => return report.errored(S, "bandit instance", &e),
    };
    let mut rng = stream_rng(derive_seed(&[seed, 2]), stream::PROBE);
    let f_cap = inst.config.f_cap;
    let b_cap = inst.config.b_cap;
    let beta = 0.5;
    let design = crate::rlhf::mle_design(&data);
    let mut mle_ratio: f64 = 0.0;
    for _ in 0..FD_POINTS {
        let w = random_ball_point(&mut rng, 3, f_cap);
        let top = design.hessian(&w).symmetric_eigenvalues().max();
        mle_ratio = mle_ratio.max(top / mle_smoothness(f_cap));
    }
    report.at_most(S, "mle_hessian_over_smoothness", mle_ratio, 1.0);
    let dpo_case = dpo_offsets(&data, beta).and_then(|off| Ok((off, max_offset(&data)?)));
    let (offsets, j_max) = match dpo_case {
        Ok(v) => v,
        Err(e) => return report.errored(S, "dpo offsets", &e),
    };
    let dd = crate::dpo::design(&data, beta, &offsets);
    let (mut grad_ratio, mut hess_ratio): (f64, f64) = (0.0, 0.0);
    for _ in 0..FD_POINTS {
        let w = random_ball_point(&mut rng, 4, b_cap);
        let (_, g) = dd.loss_grad(&w);
        grad_ratio = grad_ratio.max(g.norm() / lipschitz_loss(beta, b_cap, j_max));
        let top = dd.hessian(&w).symmetric_eigenvalues().max();
        hess_ratio = hess_ratio.max(top / lipschitz_grad(beta, b_cap, j_max));
    }
    report.at_most(S, "dpo_gradient_over_lipschitz", grad_ratio, 1.0);
    report.at_most(S, "dpo_hessian_over_smoothness", hess_ratio, 1.0);
}

/// Spectral checks on `H` built by `builder`; the hook lets tests inject a wrong builder.
pub fn spectra(report: &mut VerifyReport, seed: u64, builder: &HBuilder) {
    const S: &str = "spectra";
    let inst = match small_bandit(seed) {
        Ok(v) => v,
        Err(e) => return report.errored(S, "bandit instance", &e),
    };
    let mut rng = stream_rng(derive_seed(&[seed, 3]), stream::PROBE);
    let (mut zero_shortfall, mut psd_violation, mut gap_violation): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..5 {
        let theta = random_ball_point(&mut rng, inst.features.d_p(), inst.config.b_cap);
        let pi = loglinear_table(&theta, &inst.features);
        let n = 4;
        let contexts: Vec<usize> = (0..n).map(|_| rng.random_range(0..inst.features.num_contexts())).collect();
        let mut eig: Vec<f64> = builder(&pi, &contexts).symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        let tiny = 1e-12;
        let zeros = eig.iter().filter(|v| v.abs() <= tiny).count();
        zero_shortfall = zero_shortfall.max(n as f64 - zeros as f64);
        psd_violation = psd_violation.max(-eig[0]);
        let min_pi = contexts
            .iter()
            .flat_map(|&x| pi.row(x).iter().copied())
            .fold(f64::INFINITY, f64::min);
        gap_violation = gap_violation.max(min_pi - eig[n]);
    }
    report.at_most(S, "h_zero_eigenvalue_multiplicity_shortfall", zero_shortfall, 0.0);
    report.at_most(S, "h_negative_eigenvalue", psd_violation, 1e-12);
    report.at_most(S, "h_first_positive_eigenvalue_below_min_prob", gap_violation, 1e-12);
}

fn mdp_suite(report: &mut VerifyReport, seed: u64) {
    const S: &str = "mdp";
    let inst = match small_mdp(seed) {
        Ok(v) => v,
        Err(e) => return report.errored(S, "mdp instance", &e),
    };
    let check = || -> Result<Vec<(&'static str, f64, f64)>> {
        let mut out = Vec::new();
        let d_mu = mdp::occupancy_of_policy(&inst.mu_table, &inst.mdp)?;
        out.push(("occupancy_flow_residual", mdp::flow_residual(&d_mu, &inst.mdp).amax(), 1e-10));
        let back = mdp::policy_from_occupancy(&d_mu)?;
        out.push(("policy_occupancy_round_trip", back.max_abs_diff(&inst.mu_table), 1e-10));
        let beta = 0.5;
        let (d_star, dual) = mdp::solve_regularized_occupancy(&inst.reward_table, &d_mu, beta, &inst.mdp)?;
        out.push(("dual_stationarity", dual.grad_norm, 1e-8));
        out.push(("optimum_flow_residual", mdp::flow_residual(&d_star, &inst.mdp).amax(), 1e-8));
        let primal = mdp::regularized_objective(&d_star, &inst.reward_table, &d_mu, beta);
        let dual_value = mdp::dual_objective(&dual.alpha, &inst.reward_table, &d_mu, beta, &inst.mdp);
        out.push(("duality_gap", (primal - dual_value).abs(), 1e-8));
        Ok(out)
    };
    match check() {
        Ok(rows) => {
            for (p, m, t) in rows {
                report.at_most(S, p, m, t);
            }
        }
        Err(e) => report.errored(S, "occupancy checks", &e),
    }
    // One state with a self loop reduces to the Gibbs policy.
    let single = || -> Result<f64> {
        let ny = 4;
        let mut rng = stream_rng(derive_seed(&[seed, 4]), stream::PROBE);
        let rewards: Vec<f64> = (0..ny).map(|_| rng.random_range(-1.0..1.0)).collect();
        let reward = crate::domain::RewardTable::new(1, ny, rewards)?;
        let mu = TabularPolicy::from_logits(1, ny, &(0..ny).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let chain = crate::envgen::DeterministicMdp::new(1, ny, vec![0; ny], 0.6, vec![1.0], 1e-6)?;
        let d_mu = mdp::occupancy_of_policy(&mu, &chain)?;
        let (d_star, _) = mdp::solve_regularized_occupancy(&reward, &d_mu, 0.7, &chain)?;
        let gibbs = gibbs_policy(&reward, &mu, 0.7)?.policy;
        Ok(mdp::policy_from_occupancy(&d_star)?.max_abs_diff(&gibbs))
    };
    record(report, S, "single_state_matches_gibbs", single(), |r, v| {
        r.at_most(S, "single_state_matches_gibbs", v, 1e-8)
    });
}

fn rates(report: &mut VerifyReport, seed: u64) {
    const S: &str = "rates";
    let mle = || -> Result<(f64, f64)> {
        let inst = make_bandit_instance(&InstanceConfig {
            d_r: 4,
            d_p: 4,
            seed,
            ..InstanceConfig::default()
        })?;
        let data = sample_preferences(&inst, 128, derive_seed(&[seed, 128]))?;
        let f = inst.config.f_cap;
        let trace = mle_pgd(&data, f, default_mle_step(f), 200, &DVector::zeros(4))?;
        let best = trace.last().expect("trace").loss;
        let series: Vec<(f64, f64)> = trace[10..100]
            .iter()
            .map(|s| (s.t as f64, s.loss - best + 1e-300))
            .collect();
        let fit = rate_fit(&series, RateModel::Geometric)?;
        Ok((fit.ratio, trace[0].loss - best))
    };
    record(report, S, "mle_pgd_geometric_ratio", mle(), |r, (ratio, drop)| {
        r.at_most(S, "mle_pgd_geometric_ratio", ratio, 1.0 - 1e-6);
        r.at_least(S, "mle_pgd_loss_decrease", drop, 0.0);
    });
    let npg = || -> Result<f64> {
        let inst = make_bandit_instance(&full_rank_config(seed))?;
        let contexts = vec![0, 1, 2, 3];
        let data = crate::envgen::sample_preferences_at(&inst, &contexts, derive_seed(&[seed, 5]))?;
        let run = npg_run(
            &data,
            &inst.features,
            &inst.true_reward,
            &inst.mu_table,
            NpgSettings {
                beta: 1.0,
                eta_prime: None,
                iters: 30,
            },
            &inst.mu.theta,
        )?;
        let series: Vec<(f64, f64)> = run.states[5..25].iter().map(|s| (s.t as f64, s.gap.max(1e-300))).collect();
        Ok(rate_fit(&series, RateModel::Geometric)?.slope)
    };
    record(report, S, "npg_gap_log_slope", npg(), |r, v| r.at_most(S, "npg_gap_log_slope", v, -0.5));
    let gibbs = || -> Result<f64> {
        let inst = small_bandit(seed)?;
        let beta = 0.8;
        let pi = gibbs_policy(&inst.true_reward, &inst.mu_table, beta)?.policy;
        let oracle = tabular_regularized_oracle(&inst.true_reward, &inst.mu_table, beta, &inst.rho)?;
        let v_gibbs = values(&pi, &inst.true_reward, &inst.rho, beta, &inst.mu_table)?.1;
        let v_oracle = values(&oracle, &inst.true_reward, &inst.rho, beta, &inst.mu_table)?.1;
        Ok(v_oracle - v_gibbs)
    };
    record(report, S, "gibbs_optimality_shortfall", gibbs(), |r, v| {
        r.at_most(S, "gibbs_optimality_shortfall", v, 1e-6)
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass_on_default_seed() {
        let report = run_suite("all", 0).unwrap();
        assert!(report.passed(), "{:#?}", report.failures());
        for s in SUITES {
            assert!(report.entries.iter().any(|e| e.suite == s));
        }
    }

    #[test]
    fn gradient_suite_covers_three_losses() {
        let report = run_suite("gradients", 3).unwrap();
        for kind in ["mle_loss", "dpo_loss", "mdp_dpo_loss"] {
            assert!(report.entries.iter().any(|e| e.property.starts_with(kind)), "{kind}");
        }
    }

    #[test]
    fn tampered_h_builder_fails_by_name() {
        let mut report = VerifyReport::default();
        let tampered = |pi: &TabularPolicy, ctx: &[usize]| {
            let h = h_matrix(pi, ctx);
            DMatrix::from_diagonal(&h.diagonal())
        };
        spectra(&mut report, 0, &tampered);
        let failed: Vec<_> = report.failures().iter().map(|e| e.property.clone()).collect();
        assert!(failed.contains(&"h_zero_eigenvalue_multiplicity_shortfall".to_string()), "{failed:?}");
    }

    #[test]
    fn unknown_suite_is_an_error() {
        assert!(run_suite("bogus", 0).is_err());
    }
}
