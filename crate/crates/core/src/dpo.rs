//! Direct preference optimization for loglinear policies and loglinear occupancies.
//!
//! Both losses are logistic regressions with fixed offsets. For a bandit record
//! the margin is `β(θᵀψ̄ − J)` with `J = log μ(y^w|x) − log μ(y^l|x)`; for a
//! trajectory pair it is `β(θᵀψ̄′ + K)` with `K` the discounted log-ratio of
//! reference occupancies along the two paths.

use nalgebra::{DMatrix, DVector};

use crate::domain::{project_ball, DatasetKind, LogisticDesign, PreferenceDataset};
use crate::error::{Error, Result};

/// Offsets `c_i` such that the margin is `β·θᵀψ̄_i + c_i`.
pub fn dpo_offsets(data: &PreferenceDataset, beta: f64) -> Result<DVector<f64>> {
    let raw = data.offsets.as_ref().ok_or(Error::MissingOffsets)?;
    Ok(match data.kind {
        DatasetKind::Bandit => raw * -beta,
        DatasetKind::Trajectory => raw * beta,
    })
}

fn check(theta: &DVector<f64>, data: &PreferenceDataset, kind: DatasetKind) -> Result<()> {
    if data.kind != kind {
        return Err(Error::DatasetKind(match kind {
            DatasetKind::Bandit => "bandit",
            DatasetKind::Trajectory => "trajectory",
        }));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if theta.len() != data.psi_diff.ncols() {
        return Err(Error::Shape(format!(
            "θ has length {}, features have {}",
            theta.len(),
            data.psi_diff.ncols()
        )));
    }
    Ok(())
}

/// `(1/n) Σ ln(1 + e^{−β(θᵀψ̄_i − J_i)})` and its gradient.
pub fn dpo_loss_grad(theta: &DVector<f64>, data: &PreferenceDataset, beta: f64) -> Result<(f64, DVector<f64>)> {
    check(theta, data, DatasetKind::Bandit)?;
    let offsets = dpo_offsets(data, beta)?;
    Ok(design(data, beta, &offsets).loss_grad(theta))
}

/// `(1/n) Σ ln(1 + e^{−β(θᵀψ̄′_i + K_i)})` and its gradient.
pub fn dpo_mdp_loss_grad(theta: &DVector<f64>, data: &PreferenceDataset, beta: f64) -> Result<(f64, DVector<f64>)> {
    check(theta, data, DatasetKind::Trajectory)?;
    let offsets = dpo_offsets(data, beta)?;
    Ok(design(data, beta, &offsets).loss_grad(theta))
}

/// Logistic view of the DPO loss on `data`.
pub fn design<'a>(data: &'a PreferenceDataset, beta: f64, offsets: &'a DVector<f64>) -> LogisticDesign<'a> {
    LogisticDesign {
        rows: &data.psi_diff,
        scale: beta,
        offsets: Some(offsets),
    }
}

/// Largest `|J_i|` (or `|K_i|`).
pub fn max_offset(data: &PreferenceDataset) -> Result<f64> {
    let raw = data.offsets.as_ref().ok_or(Error::MissingOffsets)?;
    Ok(raw.amax())
}

/// Loss Lipschitz bound `β e^{2β(B + J_max)}`.
pub fn lipschitz_loss(beta: f64, b_cap: f64, j_max: f64) -> f64 {
    beta * (2.0 * beta * (b_cap + j_max)).exp()
}

/// Gradient Lipschitz bound `β² e^{2β(B + J_max)}`.
pub fn lipschitz_grad(beta: f64, b_cap: f64, j_max: f64) -> f64 {
    beta * beta * (2.0 * beta * (b_cap + j_max)).exp()
}

/// `‖v‖²_Σ` with `Σ = (1/n) Σ a_i a_iᵀ` over the rows of `rows`.
pub fn seminorm_sq(rows: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    (rows * v).norm_squared() / rows.nrows() as f64
}

/// One projected-gradient iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct DpoState {
    pub theta: DVector<f64>,
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// `‖θ_t − θ*‖²_{Σ_P}` when a reference solution is supplied.
    pub seminorm_gap: Option<f64>,
}

/// Projected gradient descent on a logistic design over the `cap`-ball.
pub fn logistic_pgd(
    design: &LogisticDesign<'_>,
    cap: f64,
    eta: f64,
    iters: usize,
    w0: &DVector<f64>,
    reference: Option<&DVector<f64>>,
) -> Result<Vec<DpoState>> {
    if !(eta >= 0.0) {
        return Err(Error::Parameter(format!("step must be nonnegative, got {eta}")));
    }
    let mut w = project_ball(w0, cap);
    let mut out = Vec::with_capacity(iters + 1);
    for t in 0..=iters {
        let (loss, grad) = design.loss_grad(&w);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iter: t,
                detail: format!("loss {loss}"),
            });
        }
        out.push(DpoState {
            theta: w.clone(),
            t,
            loss,
            grad_norm: grad.norm(),
            seminorm_gap: reference.map(|r| seminorm_sq(design.rows, &(&w - r))),
        });
        if t < iters {
            w = project_ball(&(&w - grad * eta), cap);
        }
    }
    Ok(out)
}

/// Settings for [`dpo_pgd`].
#[derive(Debug, Clone, Copy)]
pub struct DpoSettings {
    pub beta: f64,
    pub b_cap: f64,
    /// Defaults to `1/L′₂` when `None`.
    pub eta: Option<f64>,
    pub iters: usize,
}

/// Projected gradient descent on the DPO loss (bandit or trajectory data).
pub fn dpo_pgd(
    data: &PreferenceDataset,
    settings: DpoSettings,
    theta0: &DVector<f64>,
    reference: Option<&DVector<f64>>,
) -> Result<Vec<DpoState>> {
    check(theta0, data, data.kind)?;
    let offsets = dpo_offsets(data, settings.beta)?;
    let eta = match settings.eta {
        Some(e) => e,
        None => 1.0 / lipschitz_grad(settings.beta, settings.b_cap, max_offset(data)?),
    };
    logistic_pgd(&design(data, settings.beta, &offsets), settings.b_cap, eta, settings.iters, theta0, reference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Trajectory, TrajectoryRecord};
    use crate::envgen::{
        make_bandit_instance, make_mdp_instance, sample_preferences, sample_trajectory_preferences, InstanceConfig,
    };
    use crate::mdp::{attach_occupancy_offsets, occupancy_of_policy};
    use crate::testutil::{central_difference, relative_error};
    use proptest::prelude::*;

    fn bandit_data(seed: u64, n: usize, mu_norm: f64) -> PreferenceDataset {
        let inst = make_bandit_instance(&InstanceConfig {
            x: 6,
            y: 5,
            d_r: 3,
            d_p: 5,
            mu_norm,
            seed,
            ..InstanceConfig::default()
        })
        .unwrap();
        sample_preferences(&inst, n, seed + 1).unwrap()
    }

    fn mdp_config() -> InstanceConfig {
        InstanceConfig {
            x: 4,
            y: 3,
            d_r: 2,
            d_p: 3,
            gamma: 0.5,
            tail_tolerance: 1e-2,
            seed: 3,
            ..InstanceConfig::default()
        }
    }

    #[test]
    fn uniform_reference_at_origin() {
        let data = bandit_data(1, 30, 0.0);
        assert!(data.offsets.as_ref().unwrap().amax() == 0.0);
        let (loss, _) = dpo_loss_grad(&DVector::zeros(5), &data, 0.7).unwrap();
        assert!((loss - 2f64.ln()).abs() <= 4.0 * f64::EPSILON);
    }

    #[test]
    fn zero_temperature_is_flat() {
        let data = bandit_data(2, 30, 0.5);
        let a = dpo_loss_grad(&DVector::from_element(5, 0.3), &data, 0.0).unwrap();
        let b = dpo_loss_grad(&DVector::from_element(5, -2.0), &data, 0.0).unwrap();
        assert_eq!(a.0, b.0);
        assert!(a.1.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bandit_gradient_matches_finite_differences() {
        let data = bandit_data(3, 50, 0.5);
        let theta = DVector::from_vec(vec![0.5, -1.0, 0.2, 0.8, -0.3]);
        let (_, g) = dpo_loss_grad(&theta, &data, 1.3).unwrap();
        let fd = central_difference(|t| dpo_loss_grad(t, &data, 1.3).unwrap().0, &theta, 1e-6);
        assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
    }

    #[test]
    fn kind_and_offset_errors() {
        let mut data = bandit_data(4, 10, 0.5);
        assert!(matches!(
            dpo_mdp_loss_grad(&DVector::zeros(5), &data, 1.0),
            Err(Error::DatasetKind("trajectory"))
        ));
        data.offsets = None;
        assert!(matches!(dpo_loss_grad(&DVector::zeros(5), &data, 1.0), Err(Error::MissingOffsets)));
    }

    #[test]
    fn pgd_degenerate_and_projected() {
        let data = bandit_data(5, 40, 0.5);
        let theta0 = DVector::from_element(5, 0.1);
        let settings = DpoSettings { beta: 1.0, b_cap: 2.0, eta: Some(0.0), iters: 5 };
        assert!(dpo_pgd(&data, settings, &theta0, None).unwrap().iter().all(|s| s.theta == theta0));
        let settings = DpoSettings { beta: 1.0, b_cap: 0.2, eta: Some(5.0), iters: 50 };
        assert!(dpo_pgd(&data, settings, &theta0, None)
            .unwrap()
            .iter()
            .all(|s| s.theta.norm() <= 0.2 * (1.0 + 1e-12)));
    }

    #[test]
    fn pgd_monotone_at_default_step() {
        let data = bandit_data(6, 100, 0.5);
        let settings = DpoSettings { beta: 1.0, b_cap: 1.0, eta: None, iters: 200 };
        let trace = dpo_pgd(&data, settings, &DVector::zeros(5), None).unwrap();
        for w in trace.windows(2) {
            assert!(w[1].loss <= w[0].loss + 1e-15);
        }
        assert!(trace.last().unwrap().loss < trace[0].loss);
    }

    #[test]
    fn identical_paths_contribute_ln2() {
        let inst = make_mdp_instance(&mdp_config()).unwrap();
        let tau = Trajectory { states: vec![0, 1, 2], actions: vec![1, 0, 2] };
        let rec = TrajectoryRecord { x0: 0, winner: tau.clone(), loser: tau };
        let mut data = PreferenceDataset::from_trajectories(vec![rec], &inst.features, inst.mdp.gamma).unwrap();
        let d_mu = occupancy_of_policy(&inst.mu_table, &inst.mdp).unwrap();
        attach_occupancy_offsets(&mut data, &d_mu).unwrap();
        let theta = DVector::from_element(inst.features.d_m(), 0.4);
        let (loss, grad) = dpo_mdp_loss_grad(&theta, &data, 2.0).unwrap();
        assert_eq!(loss, 2f64.ln());
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mdp_gradient_matches_finite_differences() {
        let cfg = InstanceConfig { tail_tolerance: 1e-6, gamma: 0.6, ..mdp_config() };
        let inst = make_mdp_instance(&cfg).unwrap();
        let data = sample_trajectory_preferences(&inst, 20, 7).unwrap();
        assert_eq!(data.trajectories[0].winner.len(), inst.mdp.horizon);
        let d = inst.features.d_m();
        let theta = DVector::from_fn(d, |k, _| ((k as f64) * 0.7).sin());
        let (_, g) = dpo_mdp_loss_grad(&theta, &data, 0.8).unwrap();
        let fd = central_difference(|t| dpo_mdp_loss_grad(t, &data, 0.8).unwrap().0, &theta, 1e-6);
        assert!(relative_error(&g, &fd, 1e-8) <= 1e-6);
        let (_, g0) = dpo_mdp_loss_grad(&theta, &data, 0.0).unwrap();
        assert!(g0.iter().all(|&v| v == 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn loss_is_convex(a in prop::collection::vec(-2.0f64..2.0, 5), b in prop::collection::vec(-2.0f64..2.0, 5), lam in 0.0f64..1.0) {
            let data = bandit_data(8, 60, 0.5);
            let a = DVector::from_vec(a);
            let b = DVector::from_vec(b);
            let l = |w: &DVector<f64>| dpo_loss_grad(w, &data, 0.9).unwrap().0;
            prop_assert!(l(&(&a * lam + &b * (1.0 - lam))) <= lam * l(&a) + (1.0 - lam) * l(&b) + 1e-10);
        }

        #[test]
        fn lipschitz_certificates(w in prop::collection::vec(-1.0f64..1.0, 5), dir in prop::collection::vec(-1.0f64..1.0, 5), beta in 0.2f64..2.0) {
            let b_cap = 1.0;
            let data = bandit_data(9, 80, 0.5);
            let j_max = max_offset(&data).unwrap();
            let w = project_ball(&DVector::from_vec(w), b_cap);
            let (_, g) = dpo_loss_grad(&w, &data, beta).unwrap();
            prop_assert!(g.norm() <= lipschitz_loss(beta, b_cap, j_max));
            let dir = DVector::from_vec(dir);
            prop_assume!(dir.norm() > 1e-3);
            let dir = dir.normalize() * 1e-5;
            let (_, g2) = dpo_loss_grad(&(&w + &dir), &data, beta).unwrap();
            prop_assert!((g2 - g).norm() / dir.norm() <= lipschitz_grad(beta, b_cap, j_max) * (1.0 + 1e-3));
        }
    }
}
