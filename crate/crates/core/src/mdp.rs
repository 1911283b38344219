//! Occupancy measures, Bellman flow, and the regularized dual for deterministic MDPs.
//!
//! An occupancy `d(x, y)` is feasible when for every state
//!
//! ```text
//! Σ_y d(x, y) = (1 − γ) ρ(x) + γ Σ_{x′,y′ : T(x′,y′) = x} d(x′, y′).
//! ```
//!
//! The regularized problem maximizes `Σ d·r − β KL(d ‖ d_μ)` over feasible `d`.
//! With multipliers `α` on the flow constraints and shaped reward
//! `e_α(x, y) = r(x, y) + γ α(T(x, y)) − α(x)`, the Lagrangian is maximized by
//! `d_α = d_μ · exp(e_α/β − 1)`, giving the convex dual
//!
//! ```text
//! g(α) = (1 − γ) ρᵀα + β Σ d_μ · exp(e_α/β − 1),
//! ```
//!
//! whose gradient is minus the flow residual of `d_α`. We minimize `g` with
//! damped Newton steps; at the minimizer `d_α` is the regularized optimum and
//! `g(α*)` equals the primal value.
//!
//! Values use `V = Σ d·r / (1 − γ)`, matching the trajectory definition
//! `E[Σ_t γ^t r]` under the `(1 − γ)`-normalized occupancy.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureSystem, PreferenceDataset, RewardTable, TabularPolicy, Trajectory};
use crate::envgen::DeterministicMdp;
use crate::error::{Error, Result};

/// Discounted state-action visitation, row-major over `(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub num_states: usize,
    pub num_actions: usize,
    pub d: Vec<f64>,
}

impl OccupancyMeasure {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.d[x * self.num_actions + y]
    }

    pub fn state_mass(&self, x: usize) -> f64 {
        self.d[x * self.num_actions..(x + 1) * self.num_actions].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.d.iter().sum()
    }

    /// Rescales to unit total mass.
    pub fn normalized(mut self) -> Self {
        let s = self.total();
        for v in &mut self.d {
            *v /= s;
        }
        self
    }
}

/// Flow multipliers and the shaped reward they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    pub alpha: Vec<f64>,
    /// `e_α(x, y)` row-major.
    pub advantage: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn check_sizes(mdp: &DeterministicMdp, pairs: usize) -> Result<()> {
    if pairs != mdp.num_states * mdp.num_actions {
        return Err(Error::Shape(format!(
            "table has {pairs} pairs, MDP has {}",
            mdp.num_states * mdp.num_actions
        )));
    }
    Ok(())
}

/// State-to-state transition matrix under `policy`: `P[x][x′] = Σ_y π(y|x) 1(T(x,y) = x′)`.
fn state_transition(policy: &TabularPolicy, mdp: &DeterministicMdp) -> DMatrix<f64> {
    let n = mdp.num_states;
    let mut p = DMatrix::zeros(n, n);
    for x in 0..n {
        for y in 0..mdp.num_actions {
            p[(x, mdp.next(x, y))] += policy.prob(x, y);
        }
    }
    p
}

/// Solves the flow equations for `d(x, y) = d(x)π(y|x)` by dense LU.
pub fn occupancy_of_policy(policy: &TabularPolicy, mdp: &DeterministicMdp) -> Result<OccupancyMeasure> {
    check_sizes(mdp, policy.probs.len())?;
    let n = mdp.num_states;
    let p = state_transition(policy, mdp);
    let a = DMatrix::identity(n, n) - p.transpose() * mdp.gamma;
    let b = DVector::from_iterator(n, mdp.rho.iter().map(|r| (1.0 - mdp.gamma) * r));
    let state = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Singular("flow system".into()))?;
    let d = (0..n * mdp.num_actions)
        .map(|j| state[j / mdp.num_actions] * policy.probs[j])
        .collect();
    Ok(OccupancyMeasure {
        num_states: n,
        num_actions: mdp.num_actions,
        d,
    })
}

/// `Σ_y d(x, y) − (1 − γ)ρ(x) − γ·inflow(x)` per state.
pub fn flow_residual(occ: &OccupancyMeasure, mdp: &DeterministicMdp) -> DVector<f64> {
    let n = mdp.num_states;
    let mut res = DVector::from_iterator(n, (0..n).map(|x| occ.state_mass(x) - (1.0 - mdp.gamma) * mdp.rho[x]));
    for x in 0..n {
        for y in 0..mdp.num_actions {
            res[mdp.next(x, y)] -= mdp.gamma * occ.get(x, y);
        }
    }
    res
}

/// `π(y|x) = d(x, y) / Σ_y d(x, y)`.
pub fn policy_from_occupancy(occ: &OccupancyMeasure) -> Result<TabularPolicy> {
    let zero: Vec<usize> = (0..occ.num_states).filter(|&x| !(occ.state_mass(x) > 0.0)).collect();
    if !zero.is_empty() {
        return Err(Error::ZeroMass(zero));
    }
    let ny = occ.num_actions;
    let mut probs = Vec::with_capacity(occ.d.len());
    let mut log_probs = Vec::with_capacity(occ.d.len());
    for x in 0..occ.num_states {
        let row = &occ.d[x * ny..(x + 1) * ny];
        let s: f64 = row.iter().sum();
        for &v in row {
            probs.push(v / s);
            log_probs.push(v.ln() - s.ln());
        }
    }
    Ok(TabularPolicy {
        num_contexts: occ.num_states,
        num_actions: ny,
        probs,
        log_probs,
    })
}

/// `Σ d·r / (1 − γ)`.
pub fn value_from_occupancy(occ: &OccupancyMeasure, reward: &RewardTable, gamma: f64) -> f64 {
    occ.d.iter().zip(&reward.values).map(|(d, r)| d * r).sum::<f64>() / (1.0 - gamma)
}

/// `Σ d·r − β Σ d log(d/d_μ)`, without the `1/(1 − γ)` factor.
pub fn regularized_objective(
    occ: &OccupancyMeasure,
    reward: &RewardTable,
    d_mu: &OccupancyMeasure,
    beta: f64,
) -> f64 {
    occ.d
        .iter()
        .zip(&reward.values)
        .zip(&d_mu.d)
        .map(|((&d, &r), &m)| {
            if d == 0.0 {
                0.0
            } else {
                d * r - beta * d * (d / m).ln()
            }
        })
        .sum()
}

/// `e_α(x, y) = r(x, y) + γ α(T(x, y)) − α(x)`.
pub fn shaped_reward(alpha: &[f64], reward: &RewardTable, mdp: &DeterministicMdp) -> Vec<f64> {
    let ny = mdp.num_actions;
    (0..mdp.num_states * ny)
        .map(|j| {
            let x = j / ny;
            reward.values[j] + mdp.gamma * alpha[mdp.next(x, j % ny)] - alpha[x]
        })
        .collect()
}

/// `(1 − γ)ρᵀα + β Σ d_μ exp(e_α/β − 1)`.
pub fn dual_objective(
    alpha: &[f64],
    reward: &RewardTable,
    d_mu: &OccupancyMeasure,
    beta: f64,
    mdp: &DeterministicMdp,
) -> f64 {
    let e = shaped_reward(alpha, reward, mdp);
    let lin: f64 = alpha.iter().zip(&mdp.rho).map(|(a, r)| a * r).sum::<f64>() * (1.0 - mdp.gamma);
    let sum: f64 = e
        .iter()
        .zip(&d_mu.d)
        .map(|(ei, m)| m * (ei / beta - 1.0).exp())
        .sum();
    lin + beta * sum
}

fn dual_occupancy(e: &[f64], d_mu: &OccupancyMeasure, beta: f64) -> OccupancyMeasure {
    OccupancyMeasure {
        num_states: d_mu.num_states,
        num_actions: d_mu.num_actions,
        d: e.iter().zip(&d_mu.d).map(|(ei, m)| m * (ei / beta - 1.0).exp()).collect(),
    }
}

/// Settings for the dual solver.
#[derive(Debug, Clone, Copy)]
pub struct DualSolver {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for DualSolver {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 100_000,
        }
    }
}

impl DualSolver {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_max_iterations(mut self, n: usize) -> Self {
        self.max_iterations = n;
        self
    }

    /// Regularized optimum and its multipliers.
    pub fn solve(
        &self,
        reward: &RewardTable,
        d_mu: &OccupancyMeasure,
        beta: f64,
        mdp: &DeterministicMdp,
    ) -> Result<(OccupancyMeasure, DualVariables)> {
        if !(beta > 0.0) {
            return Err(Error::Parameter(format!("β must be positive, got {beta}")));
        }
        check_sizes(mdp, reward.values.len())?;
        if d_mu.d.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::Parameter("d_μ must be strictly positive".into()));
        }
        let n = mdp.num_states;
        let ny = mdp.num_actions;
        let mut alpha = vec![0.0; n];
        let mut value = dual_objective(&alpha, reward, d_mu, beta, mdp);
        let mut iters = 0;
        let mut grad_norm = f64::INFINITY;
        // Polish a few steps past the tolerance; Newton converges quadratically.
        let mut polish = 0;
        while iters < self.max_iterations {
            let e = shaped_reward(&alpha, reward, mdp);
            let occ = dual_occupancy(&e, d_mu, beta);
            let grad = -flow_residual(&occ, mdp);
            grad_norm = grad.norm();
            if grad_norm <= self.tolerance {
                polish += 1;
                if polish > 2 || grad_norm == 0.0 {
                    break;
                }
            }
            let mut hess = DMatrix::zeros(n, n);
            for x in 0..n {
                for y in 0..ny {
                    let w = occ.get(x, y) / beta;
                    let s = mdp.next(x, y);
                    // c = γ e_s − e_x
                    hess[(s, s)] += w * mdp.gamma * mdp.gamma;
                    hess[(x, x)] += w;
                    hess[(s, x)] -= w * mdp.gamma;
                    hess[(x, s)] -= w * mdp.gamma;
                }
            }
            let step = match hess.clone().cholesky() {
                Some(ch) => -ch.solve(&grad),
                None => -&grad,
            };
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial: Vec<f64> = alpha.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
                let v = dual_objective(&trial, reward, d_mu, beta, mdp);
                if v.is_finite() && v <= value + 1e-4 * t * slope {
                    alpha = trial;
                    value = v;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            iters += 1;
            if !accepted {
                // No further decrease at working precision.
                break;
            }
        }
        if grad_norm > self.tolerance {
            return Err(Error::Convergence { iters, grad_norm });
        }
        let advantage = shaped_reward(&alpha, reward, mdp);
        let occ = dual_occupancy(&advantage, d_mu, beta).normalized();
        Ok((
            occ,
            DualVariables {
                alpha,
                advantage,
                iterations: iters,
                grad_norm,
            },
        ))
    }
}

/// Regularized optimum with the default solver settings.
pub fn solve_regularized_occupancy(
    reward: &RewardTable,
    d_mu: &OccupancyMeasure,
    beta: f64,
    mdp: &DeterministicMdp,
) -> Result<(OccupancyMeasure, DualVariables)> {
    DualSolver::default().solve(reward, d_mu, beta, mdp)
}

/// `Σ_{t<H} γ^t r(x_t, y_t)`.
pub fn discounted_return(tau: &Trajectory, reward: &RewardTable, gamma: f64, horizon: usize) -> Result<f64> {
    if tau.len() < horizon {
        return Err(Error::Parameter(format!(
            "trajectory of length {} shorter than horizon {horizon}",
            tau.len()
        )));
    }
    let mut total = 0.0;
    let mut disc = 1.0;
    for t in 0..horizon {
        total += disc * reward.get(tau.states[t], tau.actions[t]);
        disc *= gamma;
    }
    Ok(total)
}

/// Deviation of the truncated return from its occupancy-ratio expression
/// `Σ_{t<H} γ^t (β log(d*/d_μ) + β) + α*(x₀)`. The exact identity also has the
/// term `−γ^H α*(x_H)`, so on exact inputs the deviation is `γ^H |α*(x_H)|`.
#[allow(clippy::too_many_arguments)]
pub fn telescoping_check(
    d_star: &OccupancyMeasure,
    d_mu: &OccupancyMeasure,
    alpha_star: &[f64],
    beta: f64,
    tau: &Trajectory,
    reward: &RewardTable,
    gamma: f64,
    horizon: usize,
) -> Result<f64> {
    let lhs = discounted_return(tau, reward, gamma, horizon)?;
    let mut rhs = alpha_star[tau.states[0]];
    let mut disc = 1.0;
    for t in 0..horizon {
        let (x, y) = (tau.states[t], tau.actions[t]);
        rhs += disc * (beta * (d_star.get(x, y) / d_mu.get(x, y)).ln() + beta);
        disc *= gamma;
    }
    Ok((lhs - rhs).abs())
}

/// Matrix whose `(x, y)` column is `γ W(x) − [φ(x, y) + γ W(T(x, y))]`, where
/// `W(x) = E[Σ_t γ^t φ(x_t, y_t) | x₀ = x, π]`.
pub fn phi_pi_matrix(mdp: &DeterministicMdp, features: &FeatureSystem, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    check_sizes(mdp, policy.probs.len())?;
    let w = feature_values(mdp, &features.phi, policy)?;
    let ny = mdp.num_actions;
    let d = features.d_r();
    Ok(DMatrix::from_fn(d, mdp.num_states * ny, |k, j| {
        let x = j / ny;
        let s = mdp.next(x, j % ny);
        mdp.gamma * w[(x, k)] - (features.phi[(k, j)] + mdp.gamma * w[(s, k)])
    }))
}

/// Discounted feature sums `W` as an `X × d` matrix.
pub fn feature_values(mdp: &DeterministicMdp, feats: &DMatrix<f64>, policy: &TabularPolicy) -> Result<DMatrix<f64>> {
    let n = mdp.num_states;
    let ny = mdp.num_actions;
    let p = state_transition(policy, mdp);
    let a = DMatrix::identity(n, n) - p * mdp.gamma;
    let rhs = DMatrix::from_fn(n, feats.nrows(), |x, k| {
        (0..ny).map(|y| policy.prob(x, y) * feats[(k, x * ny + y)]).sum()
    });
    a.lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("feature value system".into()))
}

/// State values `V(x) = E[Σ_t γ^t r | x₀ = x, π]`.
pub fn state_values(mdp: &DeterministicMdp, reward: &RewardTable, policy: &TabularPolicy) -> Result<DVector<f64>> {
    let r = DMatrix::from_row_slice(1, reward.values.len(), &reward.values);
    Ok(feature_values(mdp, &r, policy)?.column(0).clone_owned())
}

/// Optimal deterministic policy by policy iteration; ties go to the lowest action.
pub fn optimal_policy(mdp: &DeterministicMdp, reward: &RewardTable) -> Result<TabularPolicy> {
    let n = mdp.num_states;
    let ny = mdp.num_actions;
    let greedy = |v: &DVector<f64>| -> Vec<usize> {
        (0..n)
            .map(|x| {
                let mut best = 0;
                let mut best_q = f64::NEG_INFINITY;
                for y in 0..ny {
                    let q = reward.get(x, y) + mdp.gamma * v[mdp.next(x, y)];
                    if q > best_q + 1e-13 {
                        best_q = q;
                        best = y;
                    }
                }
                best
            })
            .collect()
    };
    let mut choice = greedy(&DVector::zeros(n));
    for _ in 0..10 * n * ny + 10 {
        let pi = TabularPolicy::deterministic(ny, &choice);
        let v = state_values(mdp, reward, &pi)?;
        let next = greedy(&v);
        if next == choice {
            return Ok(pi);
        }
        choice = next;
    }
    Ok(TabularPolicy::deterministic(ny, &choice))
}

/// Jointly normalized loglinear occupancy `d_θ ∝ exp(θᵀψ′(x, y))`.
pub fn loglinear_occupancy(theta: &DVector<f64>, features: &FeatureSystem) -> Result<OccupancyMeasure> {
    let occ = features
        .psi_occ
        .as_ref()
        .ok_or_else(|| Error::Parameter("no occupancy features".into()))?;
    let logits = occ.tr_mul(theta);
    let lse = crate::domain::log_sum_exp(logits.as_slice());
    Ok(OccupancyMeasure {
        num_states: features.num_contexts(),
        num_actions: features.num_actions(),
        d: logits.iter().map(|l| (l - lse).exp()).collect(),
    })
}

/// Fills `K_i = Σ_t γ^t log(d_μ(l_t)/d_μ(w_t))` on trajectory data.
pub fn attach_occupancy_offsets(data: &mut PreferenceDataset, d_mu: &OccupancyMeasure) -> Result<()> {
    if data.kind != crate::domain::DatasetKind::Trajectory {
        return Err(Error::DatasetKind("trajectory"));
    }
    let k = data
        .trajectories
        .iter()
        .map(|rec| {
            let mut disc = 1.0;
            let mut acc = 0.0;
            for t in 0..rec.winner.len() {
                let w = d_mu.get(rec.winner.states[t], rec.winner.actions[t]);
                let l = d_mu.get(rec.loser.states[t], rec.loser.actions[t]);
                acc += disc * (l.ln() - w.ln());
                disc *= data.gamma;
            }
            acc
        })
        .collect::<Vec<_>>();
    data.offsets = Some(DVector::from_vec(k));
    Ok(())
}
