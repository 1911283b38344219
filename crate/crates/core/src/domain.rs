//! Core types and pure evaluation primitives.
//!
//! Instances have `X` contexts and `Y` actions. Every per-pair quantity is laid
//! out row-major, so pair `(x, y)` lives at column or slot `x * Y + y`.
//!
//! Probabilities are computed in log space with max-subtraction.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the unit-norm feature bound.
pub const NORM_SLACK: f64 = 1e-12;

/// Logistic function, evaluated without overflow for either sign of `z`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Bradley-Terry probability that an action with reward `r_w` beats one with `r_l`.
pub fn bt_prob(r_w: f64, r_l: f64) -> f64 {
    sigmoid(r_w - r_l)
}

/// Euclidean projection onto the ball of the given radius.
pub fn project_ball(v: &DVector<f64>, radius: f64) -> DVector<f64> {
    let norm = v.norm();
    // A few ulps of slack keep the map idempotent on its own output.
    if norm <= radius * (1.0 + 4.0 * f64::EPSILON) {
        v.clone()
    } else {
        v * (radius / norm)
    }
}

/// Log-softmax of a slice.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `ln Σ exp(l)`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// `KL(p || q)` for one row given log-probabilities, summed as
/// `Σ q·(δe^δ − e^δ + 1)` with `δ = log p − log q`. Every term is nonnegative,
/// so tiny divergences keep full relative precision.
pub fn kl_row_from_logs(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p
        .iter()
        .zip(log_q)
        .map(|(&lp, &lq)| lq.exp() * kl_kernel(lp - lq))
        .sum()
}

/// `δe^δ − e^δ + 1`, with a series near zero.
fn kl_kernel(d: f64) -> f64 {
    if d.abs() < 0.1 {
        // Σ_{k≥2} δ^k (k−1)/k!
        let mut term = d; // δ^k / k! at k = 1
        let mut sum = 0.0;
        for k in 2..=14 {
            term *= d / k as f64;
            sum += term * (k - 1) as f64;
        }
        sum
    } else if d == f64::NEG_INFINITY {
        1.0
    } else {
        d * d.exp() - d.exp_m1()
    }
}

/// Reward, policy and occupancy feature matrices of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSystem {
    num_contexts: usize,
    num_actions: usize,
    /// `d_R × XY` reward features.
    pub phi: DMatrix<f64>,
    /// `d_P × XY` policy features.
    pub psi: DMatrix<f64>,
    /// `d_M × XY` occupancy features, MDP instances only.
    pub psi_occ: Option<DMatrix<f64>>,
}

impl FeatureSystem {
    pub fn new(
        num_contexts: usize,
        num_actions: usize,
        phi: DMatrix<f64>,
        psi: DMatrix<f64>,
        psi_occ: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if num_contexts == 0 || num_actions == 0 {
            return Err(Error::Parameter("X and Y must be positive".into()));
        }
        let pairs = num_contexts * num_actions;
        let mats = [Some(&phi), Some(&psi), psi_occ.as_ref()];
        for (name, m) in ["phi", "psi", "psi_occ"].iter().zip(mats) {
            let Some(m) = m else { continue };
            if m.ncols() != pairs {
                return Err(Error::Shape(format!(
                    "{name} has {} columns, expected {pairs}",
                    m.ncols()
                )));
            }
            for (j, col) in m.column_iter().enumerate() {
                if col.norm() > 1.0 + NORM_SLACK {
                    return Err(Error::Parameter(format!(
                        "{name} column {j} has norm {} > 1",
                        col.norm()
                    )));
                }
            }
        }
        Ok(Self {
            num_contexts,
            num_actions,
            phi,
            psi,
            psi_occ,
        })
    }

    pub fn num_contexts(&self) -> usize {
        self.num_contexts
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn num_pairs(&self) -> usize {
        self.num_contexts * self.num_actions
    }

    pub fn d_r(&self) -> usize {
        self.phi.nrows()
    }

    pub fn d_p(&self) -> usize {
        self.psi.nrows()
    }

    pub fn d_m(&self) -> usize {
        self.psi_occ.as_ref().map_or(0, |m| m.nrows())
    }

    /// Column index of `(x, y)`, checked.
    pub fn index(&self, x: usize, y: usize) -> Result<usize> {
        if x >= self.num_contexts {
            return Err(Error::Index {
                what: "context",
                index: x,
                bound: self.num_contexts,
            });
        }
        if y >= self.num_actions {
            return Err(Error::Index {
                what: "action",
                index: y,
                bound: self.num_actions,
            });
        }
        Ok(x * self.num_actions + y)
    }

    pub fn phi_col(&self, x: usize, y: usize) -> DVectorView<'_, f64> {
        self.phi.column(x * self.num_actions + y)
    }

    pub fn psi_col(&self, x: usize, y: usize) -> DVectorView<'_, f64> {
        self.psi.column(x * self.num_actions + y)
    }

    /// Occupancy feature column; panics if the system has none.
    pub fn psi_occ_col(&self, x: usize, y: usize) -> DVectorView<'_, f64> {
        self.psi_occ
            .as_ref()
            .expect("occupancy features")
            .column(x * self.num_actions + y)
    }
}

/// Reward values for every `(x, y)`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub num_contexts: usize,
    pub num_actions: usize,
    pub values: Vec<f64>,
}

impl RewardTable {
    pub fn new(num_contexts: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_contexts * num_actions {
            return Err(Error::Shape(format!(
                "reward table has {} entries, expected {}",
                values.len(),
                num_contexts * num_actions
            )));
        }
        Ok(Self {
            num_contexts,
            num_actions,
            values,
        })
    }

    pub fn constant(num_contexts: usize, num_actions: usize, c: f64) -> Self {
        Self {
            num_contexts,
            num_actions,
            values: vec![c; num_contexts * num_actions],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x * self.num_actions + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.values[x * self.num_actions..(x + 1) * self.num_actions]
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }
}

/// Linear reward `r(x, y) = ⟨ω, φ(x, y)⟩` with `‖ω‖ ≤ F`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearReward {
    pub omega: DVector<f64>,
    pub cap: f64,
}

impl LinearReward {
    pub fn new(omega: DVector<f64>, cap: f64) -> Result<Self> {
        if !(cap > 0.0) {
            return Err(Error::Parameter(format!("reward cap must be positive, got {cap}")));
        }
        if omega.norm() > cap * (1.0 + NORM_SLACK) {
            return Err(Error::Parameter(format!(
                "‖ω‖ = {} exceeds cap {cap}",
                omega.norm()
            )));
        }
        Ok(Self { omega, cap })
    }

    /// Reward table over all pairs of `features`.
    pub fn table(&self, features: &FeatureSystem) -> RewardTable {
        let values = features.phi.tr_mul(&self.omega);
        RewardTable {
            num_contexts: features.num_contexts(),
            num_actions: features.num_actions(),
            values: values.as_slice().to_vec(),
        }
    }
}

/// `⟨ω, φ(x, y)⟩`.
pub fn reward_eval(reward: &LinearReward, features: &FeatureSystem, x: usize, y: usize) -> Result<f64> {
    let j = features.index(x, y)?;
    if reward.omega.len() != features.d_r() {
        return Err(Error::Shape("ω length differs from d_R".into()));
    }
    Ok(reward.omega.dot(&features.phi.column(j)))
}

/// Loglinear policy `π_θ(y|x) ∝ exp(θᵀψ(x, y))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoglinearPolicy {
    pub theta: DVector<f64>,
    pub cap: f64,
}

impl LoglinearPolicy {
    pub fn new(theta: DVector<f64>, cap: f64) -> Result<Self> {
        if theta.norm() > cap * (1.0 + NORM_SLACK) {
            return Err(Error::Parameter(format!(
                "‖θ‖ = {} exceeds cap {cap}",
                theta.norm()
            )));
        }
        Ok(Self { theta, cap })
    }

    /// Policy with no norm cap, used for unprojected iterates.
    pub fn uncapped(theta: DVector<f64>) -> Self {
        Self {
            theta,
            cap: f64::INFINITY,
        }
    }

    /// Tabular form over all contexts, using policy features.
    pub fn to_tabular(&self, features: &FeatureSystem) -> TabularPolicy {
        let logits = features.psi.tr_mul(&self.theta);
        TabularPolicy::from_logits(
            features.num_contexts(),
            features.num_actions(),
            logits.as_slice(),
        )
    }
}

/// Action probabilities of a loglinear policy at context `x`.
pub fn policy_probs(policy: &LoglinearPolicy, features: &FeatureSystem, x: usize) -> Result<DVector<f64>> {
    features.index(x, 0)?;
    let y_count = features.num_actions();
    let logits: Vec<f64> = (0..y_count)
        .map(|y| policy.theta.dot(&features.psi_col(x, y)))
        .collect();
    Ok(DVector::from_iterator(
        y_count,
        log_softmax(&logits).into_iter().map(f64::exp),
    ))
}

/// Conditional distribution per context, with log-probabilities kept alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub num_contexts: usize,
    pub num_actions: usize,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl TabularPolicy {
    /// From row-major probabilities; rows must sum to one within 1e-12.
    pub fn from_probs(num_contexts: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != num_contexts * num_actions {
            return Err(Error::Shape("policy table size".into()));
        }
        for x in 0..num_contexts {
            let row = &probs[x * num_actions..(x + 1) * num_actions];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 || row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::Parameter(format!(
                    "row {x} is not a distribution (sum {s})"
                )));
            }
        }
        let log_probs = probs.iter().map(|p| p.ln()).collect();
        Ok(Self {
            num_contexts,
            num_actions,
            probs,
            log_probs,
        })
    }

    /// Row-wise softmax of row-major logits.
    pub fn from_logits(num_contexts: usize, num_actions: usize, logits: &[f64]) -> Self {
        let mut log_probs = Vec::with_capacity(logits.len());
        for x in 0..num_contexts {
            log_probs.extend(log_softmax(&logits[x * num_actions..(x + 1) * num_actions]));
        }
        let probs = log_probs.iter().map(|l| l.exp()).collect();
        Self {
            num_contexts,
            num_actions,
            probs,
            log_probs,
        }
    }

    pub fn uniform(num_contexts: usize, num_actions: usize) -> Self {
        Self::from_logits(num_contexts, num_actions, &vec![0.0; num_contexts * num_actions])
    }

    /// Deterministic policy choosing `choice[x]`.
    pub fn deterministic(num_actions: usize, choice: &[usize]) -> Self {
        let mut probs = vec![0.0; choice.len() * num_actions];
        for (x, &y) in choice.iter().enumerate() {
            probs[x * num_actions + y] = 1.0;
        }
        let log_probs = probs.iter().map(|p: &f64| p.ln()).collect();
        Self {
            num_contexts: choice.len(),
            num_actions,
            probs,
            log_probs,
        }
    }

    pub fn prob(&self, x: usize, y: usize) -> f64 {
        self.probs[x * self.num_actions + y]
    }

    pub fn log_prob(&self, x: usize, y: usize) -> f64 {
        self.log_probs[x * self.num_actions + y]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.num_actions..(x + 1) * self.num_actions]
    }

    pub fn log_row(&self, x: usize) -> &[f64] {
        &self.log_probs[x * self.num_actions..(x + 1) * self.num_actions]
    }

    pub fn min_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest per-entry absolute difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Largest per-context total-variation distance.
    pub fn max_tv(&self, other: &Self) -> f64 {
        (0..self.num_contexts)
            .map(|x| {
                0.5 * self
                    .row(x)
                    .iter()
                    .zip(other.row(x))
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

/// `Σ_x ρ(x) Σ_y p(y|x) log(p(y|x)/q(y|x))`.
pub fn kl_policies(p: &TabularPolicy, q: &TabularPolicy, rho: &[f64]) -> Result<f64> {
    if p.probs.len() != q.probs.len() || rho.len() != p.num_contexts {
        return Err(Error::Shape("policies and ρ disagree in size".into()));
    }
    let mut total = 0.0;
    for (x, &w) in rho.iter().enumerate() {
        let mut row = 0.0;
        for y in 0..p.num_actions {
            let pp = p.prob(x, y);
            if pp == 0.0 {
                continue;
            }
            if q.prob(x, y) == 0.0 {
                return Err(Error::DivergenceUndefined { x, y });
            }
            row += pp * (p.log_prob(x, y) - q.log_prob(x, y));
        }
        total += w * row;
    }
    Ok(total)
}

/// `(V, V − β·KL(π || μ))` under context distribution `ρ`.
pub fn values(
    policy: &TabularPolicy,
    reward: &RewardTable,
    rho: &[f64],
    beta: f64,
    mu: &TabularPolicy,
) -> Result<(f64, f64)> {
    if reward.values.len() != policy.probs.len() {
        return Err(Error::Shape("reward and policy tables differ".into()));
    }
    let v: f64 = rho
        .iter()
        .enumerate()
        .map(|(x, &w)| {
            w * policy
                .row(x)
                .iter()
                .zip(reward.row(x))
                .map(|(p, r)| p * r)
                .sum::<f64>()
        })
        .sum();
    let reg = if beta == 0.0 {
        v
    } else {
        v - beta * kl_policies(policy, mu, rho)?
    };
    Ok((v, reg))
}

/// Kind of preference record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Bandit,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BanditRecord {
    pub x: usize,
    pub winner: usize,
    pub loser: usize,
}

/// State-action path of fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub x0: usize,
    pub winner: Trajectory,
    pub loser: Trajectory,
}

/// Preference pairs with cached feature differences.
///
/// `phi_diff` is `n × d_R`; `psi_diff` is `n × d_P` for bandit data and
/// `n × d_M` (occupancy features) for trajectory data. Trajectory differences
/// are discounted sums. `offsets` holds `log μ(y^w|x) − log μ(y^l|x)` for bandit
/// data, or `Σ_t γ^t log(d_μ(l_t)/d_μ(w_t))` for trajectories once attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub kind: DatasetKind,
    pub bandit: Vec<BanditRecord>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub gamma: f64,
    pub phi_diff: DMatrix<f64>,
    pub psi_diff: DMatrix<f64>,
    pub offsets: Option<DVector<f64>>,
}

impl PreferenceDataset {
    /// Bandit dataset; offsets come from `mu` when given.
    pub fn from_bandit(
        records: Vec<BanditRecord>,
        features: &FeatureSystem,
        mu: Option<&TabularPolicy>,
    ) -> Result<Self> {
        let n = records.len();
        let mut phi_diff = DMatrix::zeros(n, features.d_r());
        let mut psi_diff = DMatrix::zeros(n, features.d_p());
        for (i, r) in records.iter().enumerate() {
            let w = features.index(r.x, r.winner)?;
            let l = features.index(r.x, r.loser)?;
            if r.winner == r.loser {
                return Err(Error::Parameter(format!("record {i} has y^w = y^l")));
            }
            phi_diff
                .row_mut(i)
                .copy_from(&(features.phi.column(w) - features.phi.column(l)).transpose());
            psi_diff
                .row_mut(i)
                .copy_from(&(features.psi.column(w) - features.psi.column(l)).transpose());
        }
        let offsets = mu.map(|m| {
            DVector::from_iterator(
                n,
                records
                    .iter()
                    .map(|r| m.log_prob(r.x, r.winner) - m.log_prob(r.x, r.loser)),
            )
        });
        Ok(Self {
            kind: DatasetKind::Bandit,
            bandit: records,
            trajectories: Vec::new(),
            gamma: 0.0,
            phi_diff,
            psi_diff,
            offsets,
        })
    }

    /// Trajectory dataset with discounted feature differences; offsets unset.
    pub fn from_trajectories(
        records: Vec<TrajectoryRecord>,
        features: &FeatureSystem,
        gamma: f64,
    ) -> Result<Self> {
        let n = records.len();
        let occ = features
            .psi_occ
            .as_ref()
            .ok_or_else(|| Error::Parameter("trajectory data needs occupancy features".into()))?;
        let mut phi_diff = DMatrix::zeros(n, features.d_r());
        let mut psi_diff = DMatrix::zeros(n, occ.nrows());
        for (i, r) in records.iter().enumerate() {
            if r.winner.states.first() != Some(&r.x0) || r.loser.states.first() != Some(&r.x0) {
                return Err(Error::Parameter(format!("record {i}: paths must start at x0")));
            }
            if r.winner.len() != r.loser.len() {
                return Err(Error::Parameter(format!("record {i}: path lengths differ")));
            }
            let mut disc = 1.0;
            for t in 0..r.winner.len() {
                let w = features.index(r.winner.states[t], r.winner.actions[t])?;
                let l = features.index(r.loser.states[t], r.loser.actions[t])?;
                for k in 0..features.d_r() {
                    phi_diff[(i, k)] += disc * (features.phi[(k, w)] - features.phi[(k, l)]);
                }
                for k in 0..occ.nrows() {
                    psi_diff[(i, k)] += disc * (occ[(k, w)] - occ[(k, l)]);
                }
                disc *= gamma;
            }
        }
        Ok(Self {
            kind: DatasetKind::Trajectory,
            bandit: Vec::new(),
            trajectories: records,
            gamma,
            phi_diff,
            psi_diff,
            offsets: None,
        })
    }

    pub fn len(&self) -> usize {
        self.phi_diff.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Context (or start state) of each record.
    pub fn contexts(&self) -> Vec<usize> {
        match self.kind {
            DatasetKind::Bandit => self.bandit.iter().map(|r| r.x).collect(),
            DatasetKind::Trajectory => self.trajectories.iter().map(|r| r.x0).collect(),
        }
    }

    /// Records at the given positions, caches included.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |m: &DMatrix<f64>| {
            DMatrix::from_fn(idx.len(), m.ncols(), |i, k| m[(idx[i], k)])
        };
        Self {
            kind: self.kind,
            bandit: match self.kind {
                DatasetKind::Bandit => idx.iter().map(|&i| self.bandit[i]).collect(),
                DatasetKind::Trajectory => Vec::new(),
            },
            trajectories: match self.kind {
                DatasetKind::Trajectory => idx.iter().map(|&i| self.trajectories[i].clone()).collect(),
                DatasetKind::Bandit => Vec::new(),
            },
            gamma: self.gamma,
            phi_diff: pick(&self.phi_diff),
            psi_diff: pick(&self.psi_diff),
            offsets: self
                .offsets
                .as_ref()
                .map(|o| DVector::from_iterator(idx.len(), idx.iter().map(|&i| o[i]))),
        }
    }

    /// Even-indexed and odd-indexed records.
    pub fn split_interleaved(&self) -> (Self, Self) {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        (self.subset(&even), self.subset(&odd))
    }
}

/// Logistic loss with per-record margins `z_i = s·⟨a_i, w⟩ + c_i`.
///
/// Loss is `(1/n) Σ ln(1 + e^{−z_i})`. The reward MLE uses `s = 1, c = 0`;
/// preference optimization uses `s = β` and offsets built from the reference.
#[derive(Debug, Clone, Copy)]
pub struct LogisticDesign<'a> {
    pub rows: &'a DMatrix<f64>,
    pub scale: f64,
    pub offsets: Option<&'a DVector<f64>>,
}

impl LogisticDesign<'_> {
    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn margins(&self, w: &DVector<f64>) -> DVector<f64> {
        let mut z = self.rows * w * self.scale;
        if let Some(c) = self.offsets {
            z += c;
        }
        z
    }

    pub fn loss(&self, w: &DVector<f64>) -> f64 {
        let z = self.margins(w);
        z.iter().map(|&zi| softplus(-zi)).sum::<f64>() / self.len() as f64
    }

    pub fn loss_grad(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let n = self.len() as f64;
        let z = self.margins(w);
        let loss = z.iter().map(|&zi| softplus(-zi)).sum::<f64>() / n;
        let weights = z.map(|zi| -sigmoid(-zi) * self.scale / n);
        (loss, self.rows.tr_mul(&weights))
    }

    /// `(s²/n) Σ σ(z)σ(−z) a aᵀ`.
    pub fn hessian(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let n = self.len() as f64;
        let z = self.margins(w);
        let mut scaled = self.rows.clone();
        for (i, zi) in z.iter().enumerate() {
            let c = (sigmoid(*zi) * sigmoid(-*zi)).sqrt() * self.scale / n.sqrt();
            scaled.row_mut(i).scale_mut(c);
        }
        scaled.tr_mul(&scaled)
    }
}
