//! Two-phase RLHF: reward maximum likelihood, then KL-regularized policy optimization.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::domain::{
    kl_row_from_logs, log_sum_exp, project_ball, FeatureSystem, LogisticDesign, LoglinearPolicy,
    PreferenceDataset, RewardTable, TabularPolicy,
};
use crate::error::{Error, Result};

/// Relative singular-value cutoff for the NPG preconditioner.
pub const PINV_CUTOFF: f64 = 1e-10;
/// Upper limit on the default NPG step.
pub const NPG_STEP_CAP: f64 = 1e4;

/// Reward MLE as an offset-free logistic regression on `φ̄`.
pub fn mle_design(data: &PreferenceDataset) -> LogisticDesign<'_> {
    LogisticDesign {
        rows: &data.phi_diff,
        scale: 1.0,
        offsets: None,
    }
}

/// `(1/n) Σ ln(1 + e^{−ωᵀφ̄_i})` and its gradient.
pub fn mle_loss_grad(omega: &DVector<f64>, data: &PreferenceDataset) -> Result<(f64, DVector<f64>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if omega.len() != data.phi_diff.ncols() {
        return Err(Error::Shape(format!(
            "ω has length {}, features have {}",
            omega.len(),
            data.phi_diff.ncols()
        )));
    }
    Ok(mle_design(data).loss_grad(omega))
}

/// One projected-gradient iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct MleState {
    pub omega: DVector<f64>,
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Default reward step `e^{−2F}`.
pub fn default_mle_step(f_cap: f64) -> f64 {
    (-2.0 * f_cap).exp()
}

/// Projected gradient descent on the F-ball; returns iterates `0..=iters`.
pub fn mle_pgd(
    data: &PreferenceDataset,
    f_cap: f64,
    eta: f64,
    iters: usize,
    omega0: &DVector<f64>,
) -> Result<Vec<MleState>> {
    if !(eta >= 0.0) {
        return Err(Error::Parameter(format!("step must be nonnegative, got {eta}")));
    }
    let mut omega = project_ball(omega0, f_cap);
    let mut out = Vec::with_capacity(iters + 1);
    for t in 0..=iters {
        let (loss, grad) = mle_loss_grad(&omega, data)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iter: t,
                detail: format!("loss {loss}"),
            });
        }
        out.push(MleState {
            omega: omega.clone(),
            t,
            loss,
            grad_norm: grad.norm(),
        });
        if t < iters {
            omega = project_ball(&(&omega - grad * eta), f_cap);
        }
    }
    Ok(out)
}

/// Gibbs tilt of `μ` with its log-partition per context.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GibbsPolicy {
    pub policy: TabularPolicy,
    pub log_partition: Vec<f64>,
}

/// `π(y|x) ∝ μ(y|x) exp(r(x,y)/β)`.
pub fn gibbs_policy(reward: &RewardTable, mu: &TabularPolicy, beta: f64) -> Result<GibbsPolicy> {
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("β must be positive, got {beta}")));
    }
    if reward.values.len() != mu.probs.len() {
        return Err(Error::Shape("reward and reference tables differ".into()));
    }
    let (nx, ny) = (mu.num_contexts, mu.num_actions);
    let mut probs = Vec::with_capacity(nx * ny);
    let mut log_probs = Vec::with_capacity(nx * ny);
    let mut log_partition = Vec::with_capacity(nx);
    for x in 0..nx {
        let logits: Vec<f64> = mu
            .log_row(x)
            .iter()
            .zip(reward.row(x))
            .map(|(lm, r)| lm + r / beta)
            .collect();
        let lz = log_sum_exp(&logits);
        for l in logits {
            log_probs.push(l - lz);
            probs.push((l - lz).exp());
        }
        log_partition.push(lz);
    }
    Ok(GibbsPolicy {
        policy: TabularPolicy {
            num_contexts: nx,
            num_actions: ny,
            probs,
            log_probs,
        },
        log_partition,
    })
}

/// Deterministic per-context argmax of `r`; ties go to the lowest action.
pub fn greedy_policy(reward: &RewardTable) -> TabularPolicy {
    let choice: Vec<usize> = (0..reward.num_contexts)
        .map(|x| {
            reward
                .row(x)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect();
    TabularPolicy::deterministic(reward.num_actions, &choice)
}

fn regularized_row(policy: &TabularPolicy, reward: &RewardTable, mu: &TabularPolicy, beta: f64, x: usize) -> f64 {
    (0..policy.num_actions)
        .map(|y| {
            let p = policy.prob(x, y);
            if p == 0.0 {
                return 0.0;
            }
            let kl = if beta == 0.0 { 0.0 } else { beta * (policy.log_prob(x, y) - mu.log_prob(x, y)) };
            p * (reward.get(x, y) - kl)
        })
        .sum()
}

/// `(1/n) Σ_{x ∈ 𝒟} Σ_y π(y|x)[r(x,y) − β log(π(y|x)/μ(y|x))]`.
pub fn sample_regularized_value(
    policy: &TabularPolicy,
    reward: &RewardTable,
    data: &PreferenceDataset,
    beta: f64,
    mu: &TabularPolicy,
) -> f64 {
    let ctx = data.contexts();
    ctx.iter()
        .map(|&x| regularized_row(policy, reward, mu, beta, x))
        .sum::<f64>()
        / ctx.len() as f64
}

/// Feature columns `ψ(x_i, y)` for every record and action: `d_P × nY`.
pub fn context_features(features: &FeatureSystem, contexts: &[usize]) -> DMatrix<f64> {
    let ny = features.num_actions();
    DMatrix::from_fn(features.d_p(), contexts.len() * ny, |k, j| {
        features.psi[(k, contexts[j / ny] * ny + j % ny)]
    })
}

/// Sample regularized value of `π_θ` and its gradient in `θ`.
pub fn sample_objective_grad(
    theta: &DVector<f64>,
    features: &FeatureSystem,
    contexts: &[usize],
    reward: &RewardTable,
    mu: &TabularPolicy,
    beta: f64,
) -> (f64, DVector<f64>) {
    let w = 1.0 / contexts.len() as f64;
    weighted_objective_grad(theta, features, contexts.iter().map(|&x| (x, w)), reward, mu, beta)
}

/// Population regularized value `𝒱(π_θ)` under `ρ` and its gradient in `θ`.
pub fn population_objective_grad(
    theta: &DVector<f64>,
    features: &FeatureSystem,
    reward: &RewardTable,
    mu: &TabularPolicy,
    beta: f64,
    rho: &[f64],
) -> (f64, DVector<f64>) {
    weighted_objective_grad(theta, features, rho.iter().copied().enumerate(), reward, mu, beta)
}

fn weighted_objective_grad(
    theta: &DVector<f64>,
    features: &FeatureSystem,
    contexts: impl Iterator<Item = (usize, f64)>,
    reward: &RewardTable,
    mu: &TabularPolicy,
    beta: f64,
) -> (f64, DVector<f64>) {
    let ny = features.num_actions();
    let mut value = 0.0;
    let mut grad = DVector::zeros(theta.len());
    for (x, weight) in contexts {
        let logits: Vec<f64> = (0..ny).map(|y| features.psi_col(x, y).dot(theta)).collect();
        let lz = log_sum_exp(&logits);
        let logp: Vec<f64> = logits.iter().map(|l| l - lz).collect();
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let adv: Vec<f64> = (0..ny)
            .map(|y| reward.get(x, y) - beta * (logp[y] - mu.log_prob(x, y)))
            .collect();
        let mean_adv: f64 = p.iter().zip(&adv).map(|(a, b)| a * b).sum();
        value += weight * mean_adv;
        let mean_psi = (0..ny).fold(DVector::zeros(theta.len()), |acc, y| acc + features.psi_col(x, y) * p[y]);
        for y in 0..ny {
            // The derivative of log π averages to zero under π, leaving Cov_π(ψ, adv).
            grad += (features.psi_col(x, y) - &mean_psi) * (weight * p[y] * (adv[y] - mean_adv));
        }
    }
    (value, grad)
}

/// Block-diagonal `diag(π) − ππᵀ` over the given contexts.
pub fn h_matrix(policy: &TabularPolicy, contexts: &[usize]) -> DMatrix<f64> {
    let ny = policy.num_actions;
    let m = contexts.len() * ny;
    let mut h = DMatrix::zeros(m, m);
    for (i, &x) in contexts.iter().enumerate() {
        let row = policy.row(x);
        for a in 0..ny {
            for b in 0..ny {
                h[(i * ny + a, i * ny + b)] = if a == b { row[a] } else { 0.0 } - row[a] * row[b];
            }
        }
    }
    h
}

/// One natural-gradient iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct NpgState {
    pub theta: DVector<f64>,
    pub t: usize,
    /// `𝒱*(𝒟) − 𝒱^{π_θ}(𝒟)`.
    pub gap: f64,
    /// `βΨ_nᵀθ − r − β log μ` over all record-action slots.
    pub alpha: DVector<f64>,
    pub min_prob: f64,
    pub theta_norm: f64,
}

/// NPG trace with the preconditioner it used.
#[derive(Debug, Clone)]
pub struct NpgRun {
    pub states: Vec<NpgState>,
    /// `Ψ_n`, `d_P × nY`.
    pub psi_n: DMatrix<f64>,
    /// `(Ψ_nΨ_nᵀ)†`.
    pub gram_pinv: DMatrix<f64>,
    pub eta_prime: f64,
    /// Set when `Ψ_n` lacks full column rank.
    pub rank_deficient: bool,
}

/// Default NPG step `min(n/β, 10⁴)`.
pub fn default_npg_step(n: usize, beta: f64) -> f64 {
    (n as f64 / beta).min(NPG_STEP_CAP)
}

fn pseudo_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = PINV_CUTOFF * smax;
    let u = svd.u.as_ref().expect("requested u");
    let vt = svd.v_t.as_ref().expect("requested v_t");
    let mut pinv = DMatrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            pinv += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    (pinv, svd.singular_values)
}

/// Settings for [`npg_run`].
#[derive(Debug, Clone, Copy)]
pub struct NpgSettings {
    pub beta: f64,
    /// Defaults to [`default_npg_step`] when `None`.
    pub eta_prime: Option<f64>,
    pub iters: usize,
}

/// Natural policy gradient `θ ← θ + η′(Ψ_nΨ_nᵀ)†∇𝒱` on the sample objective.
pub fn npg_run(
    data: &PreferenceDataset,
    features: &FeatureSystem,
    reward: &RewardTable,
    mu: &TabularPolicy,
    settings: NpgSettings,
    theta0: &DVector<f64>,
) -> Result<NpgRun> {
    let beta = settings.beta;
    if !(beta > 0.0) {
        return Err(Error::Parameter(format!("β must be positive, got {beta}")));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let contexts = data.contexts();
    let n = contexts.len();
    let ny = features.num_actions();
    let eta = settings.eta_prime.unwrap_or_else(|| default_npg_step(n, beta));
    if !(eta > 0.0) {
        return Err(Error::Parameter(format!("η′ must be positive, got {eta}")));
    }
    let psi_n = context_features(features, &contexts);
    let gram = &psi_n * psi_n.transpose();
    let (gram_pinv, _) = pseudo_inverse(&gram);
    let sv = psi_n.singular_values();
    let rank_deficient = psi_n.ncols() > psi_n.nrows() || sv.min() < PINV_CUTOFF * sv.max();

    let slots = n * ny;
    let base = DVector::from_iterator(
        slots,
        (0..slots).map(|j| {
            let (x, y) = (contexts[j / ny], j % ny);
            reward.get(x, y) + beta * mu.log_prob(x, y)
        }),
    );
    let target = gibbs_policy(reward, mu, beta)?.policy;

    let mut theta = theta0.clone();
    let mut states = Vec::with_capacity(settings.iters + 1);
    for t in 0..=settings.iters {
        let policy = LoglinearPolicy::uncapped(theta.clone()).to_tabular(features);
        let alpha = psi_n.tr_mul(&theta) * beta - &base;
        let gap = beta
            * contexts
                .iter()
                .map(|&x| kl_row_from_logs(policy.log_row(x), target.log_row(x)))
                .sum::<f64>()
            / n as f64;
        let min_prob = contexts
            .iter()
            .flat_map(|&x| policy.row(x).iter().copied())
            .fold(f64::INFINITY, f64::min);
        if !gap.is_finite() {
            return Err(Error::Divergence {
                iter: t,
                detail: format!("gap {gap}"),
            });
        }
        let current = theta.clone();
        if t < settings.iters {
            let h = h_matrix(&policy, &contexts);
            let grad = -(&psi_n * (h * &alpha)) / n as f64;
            theta += &gram_pinv * grad * eta;
        }
        states.push(NpgState {
            theta_norm: current.norm(),
            theta: current,
            t,
            gap,
            alpha,
            min_prob,
        });
    }
    Ok(NpgRun {
        states,
        psi_n,
        gram_pinv,
        eta_prime: eta,
        rank_deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::BanditRecord;
    use crate::envgen::{make_bandit_instance, sample_preferences, sample_preferences_at, FeatureMode, InstanceConfig};
    use crate::testutil::{central_difference, relative_error};
    use proptest::prelude::*;

    fn instance(seed: u64) -> crate::envgen::BanditInstance {
        make_bandit_instance(&InstanceConfig {
            x: 6,
            y: 5,
            d_r: 4,
            d_p: 5,
            seed,
            ..InstanceConfig::default()
        })
        .unwrap()
    }

    fn full_rank_instance() -> crate::envgen::BanditInstance {
        make_bandit_instance(&InstanceConfig {
            x: 4,
            y: 3,
            d_r: 3,
            d_p: 12,
            feature_mode: FeatureMode::Generic,
            seed: 5,
            ..InstanceConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn mle_loss_at_origin_is_ln2() {
        let data = sample_preferences(&instance(1), 40, 2).unwrap();
        let (loss, _) = mle_loss_grad(&DVector::zeros(4), &data).unwrap();
        assert!((loss - 2f64.ln()).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn mle_single_record() {
        let phi = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let f = FeatureSystem::new(1, 2, phi, DMatrix::from_row_slice(1, 2, &[0.5, -0.5]), None).unwrap();
        let data = PreferenceDataset::from_bandit(vec![BanditRecord { x: 0, winner: 0, loser: 1 }], &f, None).unwrap();
        let (loss, grad) = mle_loss_grad(&DVector::from_vec(vec![3f64.ln(), 0.0]), &data).unwrap();
        assert!((loss - (4.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((grad[0] + 0.25).abs() < 1e-15 && grad[1] == 0.0);
    }

    #[test]
    fn mle_gradient_matches_finite_differences() {
        let data = sample_preferences(&instance(3), 50, 4).unwrap();
        let w = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let (_, g) = mle_loss_grad(&w, &data).unwrap();
        let fd = central_difference(|v| mle_loss_grad(v, &data).unwrap().0, &w, 1e-6);
        assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
    }

    #[test]
    fn mle_errors_and_degenerate_steps() {
        let data = sample_preferences(&instance(1), 20, 2).unwrap();
        assert!(matches!(mle_loss_grad(&DVector::zeros(4), &data.subset(&[])), Err(Error::EmptyDataset)));
        let w0 = DVector::from_vec(vec![0.1, 0.2, -0.1, 0.0]);
        let trace = mle_pgd(&data, 1.0, 0.0, 5, &w0).unwrap();
        assert!(trace.iter().all(|s| s.omega == w0));
        for f in [0.01, 5.0] {
            let trace = mle_pgd(&data, f, default_mle_step(f), 50, &w0).unwrap();
            assert!(trace.iter().all(|s| s.omega.norm() <= f * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn mle_loss_is_monotone_at_default_step() {
        let data = sample_preferences(&instance(6), 200, 7).unwrap();
        let trace = mle_pgd(&data, 1.0, default_mle_step(1.0), 300, &DVector::zeros(4)).unwrap();
        for w in trace.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15);
        }
    }

    #[test]
    fn gibbs_cases() {
        let inst = instance(8);
        let c = RewardTable::constant(6, 5, 0.3);
        let g = gibbs_policy(&c, &inst.mu_table, 0.7).unwrap();
        assert!(g.policy.max_abs_diff(&inst.mu_table) < 1e-15);
        let g = gibbs_policy(&inst.true_reward, &inst.mu_table, 1e6).unwrap();
        assert!(g.policy.max_abs_diff(&inst.mu_table) <= 1e-5);
        let beta = 0.4;
        let g = gibbs_policy(&inst.true_reward, &inst.mu_table, beta).unwrap();
        for x in 0..6 {
            for y in 0..5 {
                let back = beta * (g.policy.log_prob(x, y) - inst.mu_table.log_prob(x, y)) + beta * g.log_partition[x];
                assert!((back - inst.true_reward.get(x, y)).abs() <= 1e-10);
            }
        }
        assert!(gibbs_policy(&c, &inst.mu_table, 0.0).is_err());
    }

    #[test]
    fn greedy_ties_go_low() {
        let r = RewardTable::new(2, 3, vec![0.5, 0.5, 0.1, 0.0, 0.2, 0.2]).unwrap();
        let g = greedy_policy(&r);
        assert_eq!(g.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(g.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn sample_value_cases() {
        let inst = instance(9);
        let data = sample_preferences(&inst, 30, 1).unwrap();
        let mean_mu: f64 = data
            .contexts()
            .iter()
            .map(|&x| (0..5).map(|y| inst.mu_table.prob(x, y) * inst.true_reward.get(x, y)).sum::<f64>())
            .sum::<f64>()
            / 30.0;
        let v = sample_regularized_value(&inst.mu_table, &inst.true_reward, &data, 0.8, &inst.mu_table);
        assert!((v - mean_mu).abs() < 1e-14);
        let pi = gibbs_policy(&inst.true_reward, &inst.mu_table, 0.3).unwrap().policy;
        let v0 = sample_regularized_value(&pi, &inst.true_reward, &data, 0.0, &inst.mu_table);
        let plain: f64 = data
            .contexts()
            .iter()
            .map(|&x| (0..5).map(|y| pi.prob(x, y) * inst.true_reward.get(x, y)).sum::<f64>())
            .sum::<f64>()
            / 30.0;
        assert!((v0 - plain).abs() < 1e-14);
        let all = sample_preferences_at(&inst, &[0, 1, 2, 3, 4, 5], 2).unwrap();
        let sample = sample_regularized_value(&pi, &inst.true_reward, &all, 0.3, &inst.mu_table);
        let (_, pop) = crate::domain::values(&pi, &inst.true_reward, &inst.rho, 0.3, &inst.mu_table).unwrap();
        assert!((sample - pop).abs() <= 1e-12);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let inst = instance(10);
        let ctx = [0, 3, 3, 5, 1];
        let theta = DVector::from_vec(vec![0.4, -0.3, 0.2, 0.9, -0.5]);
        let (v, g) = sample_objective_grad(&theta, &inst.features, &ctx, &inst.true_reward, &inst.mu_table, 0.6);
        let pi = LoglinearPolicy::uncapped(theta.clone()).to_tabular(&inst.features);
        let data = sample_preferences_at(&inst, &ctx, 0).unwrap();
        assert!((v - sample_regularized_value(&pi, &inst.true_reward, &data, 0.6, &inst.mu_table)).abs() < 1e-13);
        let fd = central_difference(
            |t| sample_objective_grad(t, &inst.features, &ctx, &inst.true_reward, &inst.mu_table, 0.6).0,
            &theta,
            1e-6,
        );
        assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
    }

    #[test]
    fn h_matrix_spectrum() {
        let u = TabularPolicy::uniform(1, 2);
        let h = h_matrix(&u, &[0]);
        let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        assert!(ev[0].abs() < 1e-15 && (ev[1] - 0.5).abs() < 1e-15);
        let inst = instance(11);
        let ctx = [1, 4, 4];
        let h = h_matrix(&inst.mu_table, &ctx);
        assert!((&h - h.transpose()).amax() == 0.0);
        assert!((&h * DVector::from_element(15, 1.0)).amax() <= 1e-12);
        let zeros = h.symmetric_eigenvalues().iter().filter(|l| l.abs() <= 1e-10).count();
        assert!(zeros >= 3);
    }

    #[test]
    fn npg_fixed_point() {
        let inst = full_rank_instance();
        let data = sample_preferences_at(&inst, &[0, 1, 2, 3], 1).unwrap();
        let beta = 0.5;
        let target = gibbs_policy(&inst.true_reward, &inst.mu_table, beta).unwrap().policy;
        // Solve Ψᵀθ = log π* over all 12 pairs; log Z shifts are absorbed by the softmax.
        let logs = DVector::from_vec(target.log_probs.clone());
        let theta = inst.features.psi.transpose().lu().solve(&logs).unwrap();
        let settings = NpgSettings { beta, eta_prime: None, iters: 10 };
        let run = npg_run(&data, &inst.features, &inst.true_reward, &inst.mu_table, settings, &theta).unwrap();
        assert!(!run.rank_deficient);
        assert!(run.states.iter().all(|s| s.gap <= 1e-10));
    }

    #[test]
    fn npg_alpha_recursion_and_decay() {
        let inst = full_rank_instance();
        let data = sample_preferences_at(&inst, &[0, 1, 2, 3], 1).unwrap();
        let beta = 1.0;
        let settings = NpgSettings { beta, eta_prime: None, iters: 30 };
        let run = npg_run(&data, &inst.features, &inst.true_reward, &inst.mu_table, settings, &DVector::zeros(12)).unwrap();
        let proj = run.psi_n.transpose() * &run.gram_pinv * &run.psi_n;
        assert!((proj - DMatrix::identity(12, 12)).norm() <= 1e-8);
        let ctx = data.contexts();
        for w in run.states.windows(2) {
            let pi = LoglinearPolicy::uncapped(w[0].theta.clone()).to_tabular(&inst.features);
            let h = h_matrix(&pi, &ctx);
            let predicted = (DMatrix::identity(12, 12) - h * (run.eta_prime * beta / 4.0)) * &w[0].alpha;
            assert!((predicted - &w[1].alpha).amax() <= 1e-8);
        }
        let last = run.states.last().unwrap();
        assert!(last.gap < run.states[0].gap * 1e-3);
    }

    #[test]
    fn npg_flags_rank_deficiency() {
        let inst = instance(12);
        let data = sample_preferences(&inst, 10, 1).unwrap();
        let settings = NpgSettings { beta: 1.0, eta_prime: None, iters: 2 };
        let run = npg_run(&data, &inst.features, &inst.true_reward, &inst.mu_table, settings, &DVector::zeros(5)).unwrap();
        assert!(run.rank_deficient);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn mle_loss_is_convex(a in prop::collection::vec(-1.0f64..1.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4), lam in 0.0f64..1.0) {
            let data = sample_preferences(&instance(13), 60, 3).unwrap();
            let a = DVector::from_vec(a);
            let b = DVector::from_vec(b);
            let mix = &a * lam + &b * (1.0 - lam);
            let l = |w: &DVector<f64>| mle_loss_grad(w, &data).unwrap().0;
            prop_assert!(l(&mix) <= lam * l(&a) + (1.0 - lam) * l(&b) + 1e-10);
        }

        #[test]
        fn mle_lipschitz_and_smooth(w in prop::collection::vec(-0.5f64..0.5, 4), dir in prop::collection::vec(-1.0f64..1.0, 4)) {
            let f = 1.0;
            let data = sample_preferences(&instance(14), 80, 5).unwrap();
            let w = project_ball(&DVector::from_vec(w), f);
            let (_, g) = mle_loss_grad(&w, &data).unwrap();
            let bound = 2.0 * (2.0 * f).exp();
            prop_assert!(g.norm() <= bound);
            let dir = DVector::from_vec(dir);
            prop_assume!(dir.norm() > 1e-3);
            let dir = dir.normalize() * 1e-5;
            let (_, g2) = mle_loss_grad(&(&w + &dir), &data).unwrap();
            prop_assert!((g2 - g).norm() / dir.norm() <= bound * (1.0 + 1e-3));
        }
    }
}
