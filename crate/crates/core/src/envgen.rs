//! Synthetic bandit and deterministic-MDP instances, and preference sampling.
//!
//! Reward features are drawn so that, per context, the true reward of the
//! actions is spread uniformly: each column is `a·q·u + s·z` where `u` is the
//! reward direction, `q` is uniform, and `z` is a random unit vector orthogonal
//! to `u`. The orthogonal part makes every coordinate of `ω` matter for
//! ranking, while the uniform spread leaves no margin between near-optimal
//! actions.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    bt_prob, BanditRecord, FeatureSystem, LinearReward, LoglinearPolicy, PreferenceDataset,
    RewardTable, TabularPolicy, Trajectory, TrajectoryRecord,
};
use crate::error::{Error, Result};
use crate::mdp;
use crate::rng::{stream, stream_rng};

/// Length of the reward-aligned component of a reward feature column.
const ALIGNED_SCALE: f64 = 0.7;
/// Range of the orthogonal component's length.
const ORTHOGONAL_RANGE: (f64, f64) = (0.3, 0.7);
/// Redraw budget for candidate pairs with identical features.
pub const REDRAW_BUDGET: usize = 1000;
/// Version tag written into serialized files.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Generic,
    ZeroMeanFullRank,
    NestedColumnSpace,
}

/// Instance parameters. `d_m = 0` lets nested MDP instances size the
/// occupancy features themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceConfig {
    pub x: usize,
    pub y: usize,
    pub d_r: usize,
    pub d_p: usize,
    pub d_m: usize,
    /// Reward norm cap `F`.
    pub f_cap: f64,
    /// Policy norm cap `B`.
    pub b_cap: f64,
    /// Occupancy norm cap `B′`.
    pub b_occ_cap: f64,
    pub beta: f64,
    pub realizable: bool,
    pub epsilon_app: f64,
    pub feature_mode: FeatureMode,
    pub seed: u64,
    /// Norm of the true reward parameter as a fraction of `min(F, 1)`.
    pub omega_fraction: f64,
    /// Norm of the reference policy parameter, capped at `B`.
    pub mu_norm: f64,
    pub gamma: f64,
    pub tail_tolerance: f64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            x: 20,
            y: 64,
            d_r: 8,
            d_p: 8,
            d_m: 0,
            f_cap: 1.0,
            b_cap: 10.0,
            b_occ_cap: 10.0,
            beta: 1.0,
            realizable: true,
            epsilon_app: 0.0,
            feature_mode: FeatureMode::NestedColumnSpace,
            seed: 0,
            omega_fraction: 1.0,
            mu_norm: 0.5,
            gamma: 0.9,
            tail_tolerance: 1e-6,
        }
    }
}

impl InstanceConfig {
    fn validate(&self) -> Result<()> {
        if self.x == 0 || self.y == 0 || self.d_r == 0 || self.d_p == 0 {
            return Err(Error::Config("sizes and dimensions must be positive".into()));
        }
        if self.d_r > self.x * self.y {
            return Err(Error::Config(format!(
                "d_R = {} exceeds X·Y = {}",
                self.d_r,
                self.x * self.y
            )));
        }
        if !(self.f_cap > 0.0 && self.b_cap > 0.0 && self.b_occ_cap > 0.0) {
            return Err(Error::Config("norm caps must be positive".into()));
        }
        if !(self.omega_fraction > 0.0 && self.omega_fraction <= 1.0) {
            return Err(Error::Config("omega_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("γ must lie in [0, 1)".into()));
        }
        if self.epsilon_app < 0.0 {
            return Err(Error::Config("ε_app must be nonnegative".into()));
        }
        if !self.realizable && self.epsilon_app <= 0.0 {
            return Err(Error::Config("nonrealizable mode needs ε_app > 0".into()));
        }
        if self.feature_mode == FeatureMode::NestedColumnSpace {
            let need = self.d_r + usize::from(!self.realizable);
            if self.d_p < need {
                return Err(Error::Config(format!(
                    "nested features need d_P ≥ {need}, got {}",
                    self.d_p
                )));
            }
        }
        Ok(())
    }

    fn reward_norm(&self) -> f64 {
        self.f_cap.min(1.0) * self.omega_fraction
    }
}

/// Truncation length with `γ^H / (1 − γ) ≤ tol`.
pub fn horizon_for(gamma: f64, tol: f64) -> usize {
    if gamma == 0.0 {
        return 1;
    }
    ((tol * (1.0 - gamma)).ln() / gamma.ln()).ceil().max(1.0) as usize
}

/// Contextual bandit with known ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub config: InstanceConfig,
    pub features: FeatureSystem,
    /// True reward `r*`; equals the table of `best_fit` when realizable.
    pub true_reward: RewardTable,
    /// Linear reward `ω*` (the exact least-squares fit of `r*`).
    pub best_fit: LinearReward,
    pub mu: LoglinearPolicy,
    pub mu_table: TabularPolicy,
    pub rho: Vec<f64>,
}

impl BanditInstance {
    /// `‖r* − r_{ω*}‖_∞`.
    pub fn misspecification(&self) -> f64 {
        let lin = self.best_fit.table(&self.features);
        lin.values
            .iter()
            .zip(&self.true_reward.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// SHA-256 of the serialized instance, hex encoded.
    pub fn hash(&self) -> String {
        let file = InstanceFile::from_bandit(self);
        hash_json(&file)
    }
}

/// Deterministic MDP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeterministicMdp {
    pub num_states: usize,
    pub num_actions: usize,
    /// Next state of `(x, y)` at slot `x * Y + y`.
    pub transition: Vec<usize>,
    pub gamma: f64,
    pub rho: Vec<f64>,
    pub horizon: usize,
}

impl DeterministicMdp {
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transition: Vec<usize>,
        gamma: f64,
        rho: Vec<f64>,
        tail_tolerance: f64,
    ) -> Result<Self> {
        if transition.len() != num_states * num_actions || rho.len() != num_states {
            return Err(Error::Shape("transition table or ρ has the wrong size".into()));
        }
        if let Some(&bad) = transition.iter().find(|&&s| s >= num_states) {
            return Err(Error::Index {
                what: "next state",
                index: bad,
                bound: num_states,
            });
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::Parameter("γ must lie in [0, 1)".into()));
        }
        Ok(Self {
            num_states,
            num_actions,
            transition,
            gamma,
            rho,
            horizon: horizon_for(gamma, tail_tolerance),
        })
    }

    pub fn next(&self, x: usize, y: usize) -> usize {
        self.transition[x * self.num_actions + y]
    }

    /// `γ^H / (1 − γ)`.
    pub fn tail_bound(&self) -> f64 {
        self.gamma.powi(self.horizon as i32) / (1.0 - self.gamma)
    }
}

/// MDP together with features, linear reward and reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpInstance {
    pub config: InstanceConfig,
    pub mdp: DeterministicMdp,
    pub features: FeatureSystem,
    pub reward: LinearReward,
    pub reward_table: RewardTable,
    pub mu: LoglinearPolicy,
    pub mu_table: TabularPolicy,
}

impl MdpInstance {
    pub fn hash(&self) -> String {
        hash_json(&InstanceFile::from_mdp(self))
    }
}

fn gaussian_vector(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

fn gaussian_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
    // Fill column by column so the draw order is fixed.
    let mut m = DMatrix::zeros(r, c);
    for j in 0..c {
        for i in 0..r {
            m[(i, j)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

fn unit_vector(rng: &mut ChaCha20Rng, n: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, n);
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

fn random_orthogonal(rng: &mut ChaCha20Rng, n: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, n, n).qr();
    let (q, r) = qr.unpack();
    // Fix column signs so the draw is Haar distributed.
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Divides by the largest column norm when it exceeds one.
fn normalize_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let max = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if max > 1.0 {
        m /= max;
    }
    m
}

/// Reward direction, reward features, and the true parameter.
fn draw_reward_features(
    config: &InstanceConfig,
    pairs: usize,
    q_low: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let d = config.d_r;
    let mut dir_rng = stream_rng(config.seed, stream::REWARD_DIRECTION);
    let u = unit_vector(&mut dir_rng, d);
    let mut rng = stream_rng(config.seed, stream::REWARD_FEATURES);
    let mut phi = DMatrix::zeros(d, pairs);
    for j in 0..pairs {
        let q: f64 = rng.random_range(q_low..=1.0);
        let s: f64 = rng.random_range(ORTHOGONAL_RANGE.0..=ORTHOGONAL_RANGE.1);
        let mut col = &u * (ALIGNED_SCALE * q);
        if d > 1 {
            let mut z = gaussian_vector(&mut rng, d);
            z -= &u * u.dot(&z);
            let zn = z.norm();
            if zn > 1e-12 {
                col += z * (s / zn);
            }
        }
        phi.set_column(j, &col);
    }
    (phi, u * config.reward_norm())
}

/// Orthonormal basis (as rows) of the row space of `m`.
fn row_space_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax.max(1e-300))
        .collect();
    DMatrix::from_fn(keep.len(), m.ncols(), |i, j| v_t[(keep[i], j)])
}

/// Component of `g` orthogonal to the row space of `m`.
fn orthogonal_to_rows(m: &DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let basis = row_space_basis(m);
    let coef = &basis * g;
    g - basis.tr_mul(&coef)
}

fn draw_policy_features(
    config: &InstanceConfig,
    pairs: usize,
    phi: &DMatrix<f64>,
    extra_rows: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    let d = config.d_p;
    let mut rng = stream_rng(config.seed, stream::POLICY_FEATURES);
    match config.feature_mode {
        FeatureMode::Generic => {
            let mut psi = DMatrix::zeros(d, pairs);
            for j in 0..pairs {
                let len: f64 = rng.random_range(0.5..=1.0);
                psi.set_column(j, &(unit_vector(&mut rng, d) * len));
            }
            Ok(psi)
        }
        FeatureMode::ZeroMeanFullRank => {
            if pairs < d + 1 {
                return Err(Error::Config(format!(
                    "zero-mean full-rank features need X·Y ≥ d_P + 1 = {}",
                    d + 1
                )));
            }
            let mut psi = gaussian_matrix(&mut rng, d, pairs);
            for i in 0..d {
                let mean = psi.row(i).mean();
                psi.row_mut(i).add_scalar_mut(-mean);
            }
            let sv = psi.singular_values();
            if sv.min() <= 1e-8 * sv.max() {
                return Err(Error::Config("zero-mean features are rank deficient".into()));
            }
            Ok(normalize_columns(psi))
        }
        FeatureMode::NestedColumnSpace => {
            let base = phi.nrows() + extra_rows.len();
            if d < base {
                return Err(Error::Config(format!("nested features need d_P ≥ {base}")));
            }
            let mut stack = DMatrix::zeros(d, pairs);
            stack.rows_mut(0, phi.nrows()).copy_from(phi);
            for (k, row) in extra_rows.iter().enumerate() {
                stack.row_mut(phi.nrows() + k).copy_from(&row.transpose());
            }
            if d > base {
                let noise = gaussian_matrix(&mut rng, d - base, pairs) * (0.5 / (d as f64).sqrt());
                stack.rows_mut(base, d - base).copy_from(&noise);
            }
            let q = random_orthogonal(&mut rng, d);
            Ok(normalize_columns(q * stack))
        }
    }
}

fn reference_policy(config: &InstanceConfig, features: &FeatureSystem) -> Result<(LoglinearPolicy, TabularPolicy)> {
    let mut rng = stream_rng(config.seed, stream::REFERENCE);
    let theta = unit_vector(&mut rng, config.d_p) * config.mu_norm.min(config.b_cap);
    let mu = LoglinearPolicy::new(theta, config.b_cap)?;
    let table = mu.to_tabular(features);
    Ok((mu, table))
}

/// Builds a bandit instance; deterministic in `config`.
pub fn make_bandit_instance(config: &InstanceConfig) -> Result<BanditInstance> {
    config.validate()?;
    let pairs = config.x * config.y;
    let eps = if config.realizable { 0.0 } else { config.epsilon_app };
    let norm = config.reward_norm();
    // Keep r_{ω*} ≥ ε so that r* = r_{ω*} + δ stays in [0, 1].
    let q_low = eps / (ALIGNED_SCALE * norm);
    if q_low >= 1.0 {
        return Err(Error::Config(format!(
            "ε_app = {eps} too large for reward scale {}",
            ALIGNED_SCALE * norm
        )));
    }
    let (phi, omega) = draw_reward_features(config, pairs, q_low);
    let best_fit = LinearReward::new(omega.clone(), config.f_cap)?;
    let linear = phi.tr_mul(&omega);

    let mut extra = Vec::new();
    let true_values = if config.realizable {
        linear.clone()
    } else {
        if pairs <= config.d_r {
            return Err(Error::Config("misspecification needs X·Y > d_R".into()));
        }
        let mut rng = stream_rng(config.seed, stream::MISSPECIFICATION);
        let g = gaussian_vector(&mut rng, pairs);
        let delta = orthogonal_to_rows(&phi, &g);
        let amp = delta.amax();
        if amp < 1e-12 {
            return Err(Error::Degenerate("perturbation vanished".into()));
        }
        let delta = delta * (eps / amp);
        extra.push(&delta / eps);
        &linear + delta
    };
    let psi = draw_policy_features(config, pairs, &phi, &extra)?;
    let features = FeatureSystem::new(config.x, config.y, phi, psi, None)?;
    let (mu, mu_table) = reference_policy(config, &features)?;
    Ok(BanditInstance {
        config: config.clone(),
        features,
        true_reward: RewardTable::new(config.x, config.y, true_values.as_slice().to_vec())?,
        best_fit,
        mu,
        mu_table,
        rho: vec![1.0 / config.x as f64; config.x],
    })
}

/// Builds an MDP instance with uniformly random transitions.
///
/// In nested mode the occupancy features span the reward features, the policy
/// features, and indicator rows of the current and next state. That span holds
/// `log d_μ` and every shaped reward `r + γα(T(x,y)) − α(x)`, so the optimal
/// regularized occupancy is loglinear.
pub fn make_mdp_instance(config: &InstanceConfig) -> Result<MdpInstance> {
    config.validate()?;
    if !config.realizable {
        return Err(Error::Config("MDP instances are realizable only".into()));
    }
    let (nx, ny) = (config.x, config.y);
    let pairs = nx * ny;
    let mut trng = stream_rng(config.seed, stream::TRANSITIONS);
    let transition: Vec<usize> = (0..pairs).map(|_| trng.random_range(0..nx)).collect();
    let mdp = DeterministicMdp::new(
        nx,
        ny,
        transition,
        config.gamma,
        vec![1.0 / nx as f64; nx],
        config.tail_tolerance,
    )?;
    let (phi, omega) = draw_reward_features(config, pairs, 0.0);
    let reward = LinearReward::new(omega, config.f_cap)?;
    let psi = draw_policy_features(config, pairs, &phi, &[])?;

    let mut orng = stream_rng(config.seed, stream::OCCUPANCY_FEATURES);
    let psi_occ = match config.feature_mode {
        FeatureMode::NestedColumnSpace => {
            let d = phi.nrows() + psi.nrows() + 2 * nx;
            if config.d_m != 0 && config.d_m != d {
                return Err(Error::Config(format!("nested MDP features fix d_M = {d}")));
            }
            let mut stack = DMatrix::zeros(d, pairs);
            stack.rows_mut(0, phi.nrows()).copy_from(&phi);
            stack.rows_mut(phi.nrows(), psi.nrows()).copy_from(&psi);
            let off = phi.nrows() + psi.nrows();
            for x in 0..nx {
                for y in 0..ny {
                    let j = x * ny + y;
                    stack[(off + x, j)] = 1.0;
                    stack[(off + nx + mdp.next(x, y), j)] = 1.0;
                }
            }
            let q = random_orthogonal(&mut orng, d);
            normalize_columns(q * stack)
        }
        _ => {
            if config.d_m == 0 {
                return Err(Error::Config("d_M must be positive outside nested mode".into()));
            }
            let mut m = DMatrix::zeros(config.d_m, pairs);
            for j in 0..pairs {
                let len: f64 = orng.random_range(0.5..=1.0);
                m.set_column(j, &(unit_vector(&mut orng, config.d_m) * len));
            }
            m
        }
    };
    let features = FeatureSystem::new(nx, ny, phi, psi, Some(psi_occ))?;
    let (mu, mu_table) = reference_policy(config, &features)?;
    let reward_table = reward.table(&features);
    Ok(MdpInstance {
        config: config.clone(),
        mdp,
        features,
        reward,
        reward_table,
        mu,
        mu_table,
    })
}

fn categorical(rng: &mut ChaCha20Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Draws a candidate pair from `μ(·|x)` whose reward and policy features differ.
fn candidate_pair(
    rng: &mut ChaCha20Rng,
    instance: &BanditInstance,
    x: usize,
) -> Result<(usize, usize)> {
    let row = instance.mu_table.row(x);
    let f = &instance.features;
    for _ in 0..REDRAW_BUDGET {
        let a = categorical(rng, row);
        let b = categorical(rng, row);
        if f.phi_col(x, a) != f.phi_col(x, b) && f.psi_col(x, a) != f.psi_col(x, b) {
            return Ok((a, b));
        }
    }
    Err(Error::Degenerate(format!(
        "context {x}: no distinguishable pair after {REDRAW_BUDGET} draws"
    )))
}

/// Bradley-Terry preferences with contexts drawn from `ρ`.
pub fn sample_preferences(instance: &BanditInstance, n: usize, seed: u64) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(Error::Parameter("n must be at least 1".into()));
    }
    let mut rng = stream_rng(seed, stream::PREFERENCES);
    let contexts: Vec<usize> = (0..n).map(|_| categorical(&mut rng, &instance.rho)).collect();
    label_pairs(instance, &contexts, &mut rng)
}

/// Bradley-Terry preferences at the given contexts.
pub fn sample_preferences_at(
    instance: &BanditInstance,
    contexts: &[usize],
    seed: u64,
) -> Result<PreferenceDataset> {
    if contexts.is_empty() {
        return Err(Error::Parameter("need at least one context".into()));
    }
    let mut rng = stream_rng(seed, stream::PREFERENCES);
    label_pairs(instance, contexts, &mut rng)
}

fn label_pairs(
    instance: &BanditInstance,
    contexts: &[usize],
    rng: &mut ChaCha20Rng,
) -> Result<PreferenceDataset> {
    let mut records = Vec::with_capacity(contexts.len());
    for &x in contexts {
        instance.features.index(x, 0)?;
        let (a, b) = candidate_pair(rng, instance, x)?;
        let p = bt_prob(instance.true_reward.get(x, a), instance.true_reward.get(x, b));
        let first_wins = rng.random::<f64>() < p;
        let (winner, loser) = if first_wins { (a, b) } else { (b, a) };
        records.push(BanditRecord { x, winner, loser });
    }
    PreferenceDataset::from_bandit(records, &instance.features, Some(&instance.mu_table))
}

/// Rolls out `policy` for `horizon` steps from `x0`.
pub fn rollout(
    rng: &mut ChaCha20Rng,
    mdp: &DeterministicMdp,
    policy: &TabularPolicy,
    x0: usize,
    horizon: usize,
) -> Trajectory {
    let mut states = Vec::with_capacity(horizon);
    let mut actions = Vec::with_capacity(horizon);
    let mut x = x0;
    for _ in 0..horizon {
        let y = categorical(rng, policy.row(x));
        states.push(x);
        actions.push(y);
        x = mdp.next(x, y);
    }
    Trajectory { states, actions }
}

/// Trajectory preferences under `μ`, labeled by BT on truncated discounted returns.
/// Offsets `K` are attached from the exact reference occupancy.
pub fn sample_trajectory_preferences(
    instance: &MdpInstance,
    n: usize,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n == 0 {
        return Err(Error::Parameter("n must be at least 1".into()));
    }
    let mdp = &instance.mdp;
    let h = mdp.horizon;
    let mut rng = stream_rng(seed, stream::PREFERENCES);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x0 = categorical(&mut rng, &mdp.rho);
        let a = rollout(&mut rng, mdp, &instance.mu_table, x0, h);
        let b = rollout(&mut rng, mdp, &instance.mu_table, x0, h);
        let ra = mdp::discounted_return(&a, &instance.reward_table, mdp.gamma, h)?;
        let rb = mdp::discounted_return(&b, &instance.reward_table, mdp.gamma, h)?;
        let first_wins = rng.random::<f64>() < bt_prob(ra, rb);
        let (winner, loser) = if first_wins { (a, b) } else { (b, a) };
        records.push(TrajectoryRecord { x0, winner, loser });
    }
    let mut data = PreferenceDataset::from_trajectories(records, &instance.features, mdp.gamma)?;
    let d_mu = mdp::occupancy_of_policy(&instance.mu_table, mdp)?;
    mdp::attach_occupancy_offsets(&mut data, &d_mu)?;
    Ok(data)
}

/// Dense matrix in row-major order with explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for MatrixJson {
    fn from(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }
}

impl MatrixJson {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Shape("matrix data length".into()));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Serialized form of an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub schema_version: u32,
    pub kind: String,
    pub seed: u64,
    pub config: InstanceConfig,
    pub num_contexts: usize,
    pub num_actions: usize,
    pub phi: MatrixJson,
    pub psi: MatrixJson,
    pub psi_occ: Option<MatrixJson>,
    pub omega: Vec<f64>,
    pub f_cap: f64,
    pub true_reward: Vec<f64>,
    pub theta_mu: Vec<f64>,
    pub b_cap: f64,
    pub rho: Vec<f64>,
    pub mdp: Option<DeterministicMdp>,
}

impl InstanceFile {
    pub fn from_bandit(inst: &BanditInstance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: "bandit".into(),
            seed: inst.config.seed,
            config: inst.config.clone(),
            num_contexts: inst.features.num_contexts(),
            num_actions: inst.features.num_actions(),
            phi: (&inst.features.phi).into(),
            psi: (&inst.features.psi).into(),
            psi_occ: None,
            omega: inst.best_fit.omega.as_slice().to_vec(),
            f_cap: inst.best_fit.cap,
            true_reward: inst.true_reward.values.clone(),
            theta_mu: inst.mu.theta.as_slice().to_vec(),
            b_cap: inst.mu.cap,
            rho: inst.rho.clone(),
            mdp: None,
        }
    }

    pub fn from_mdp(inst: &MdpInstance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: "mdp".into(),
            seed: inst.config.seed,
            config: inst.config.clone(),
            num_contexts: inst.features.num_contexts(),
            num_actions: inst.features.num_actions(),
            phi: (&inst.features.phi).into(),
            psi: (&inst.features.psi).into(),
            psi_occ: inst.features.psi_occ.as_ref().map(Into::into),
            omega: inst.reward.omega.as_slice().to_vec(),
            f_cap: inst.reward.cap,
            true_reward: inst.reward_table.values.clone(),
            theta_mu: inst.mu.theta.as_slice().to_vec(),
            b_cap: inst.mu.cap,
            rho: inst.mdp.rho.clone(),
            mdp: Some(inst.mdp.clone()),
        }
    }

    fn features(&self) -> Result<FeatureSystem> {
        FeatureSystem::new(
            self.num_contexts,
            self.num_actions,
            self.phi.to_matrix()?,
            self.psi.to_matrix()?,
            self.psi_occ.as_ref().map(MatrixJson::to_matrix).transpose()?,
        )
    }

    pub fn to_bandit(&self) -> Result<BanditInstance> {
        let features = self.features()?;
        let mu = LoglinearPolicy::new(DVector::from_vec(self.theta_mu.clone()), self.b_cap)?;
        let mu_table = mu.to_tabular(&features);
        Ok(BanditInstance {
            config: self.config.clone(),
            true_reward: RewardTable::new(self.num_contexts, self.num_actions, self.true_reward.clone())?,
            best_fit: LinearReward::new(DVector::from_vec(self.omega.clone()), self.f_cap)?,
            mu,
            mu_table,
            rho: self.rho.clone(),
            features,
        })
    }

    pub fn to_mdp(&self) -> Result<MdpInstance> {
        let features = self.features()?;
        let mdp = self
            .mdp
            .clone()
            .ok_or_else(|| Error::Parameter("file holds no MDP".into()))?;
        let mu = LoglinearPolicy::new(DVector::from_vec(self.theta_mu.clone()), self.b_cap)?;
        let mu_table = mu.to_tabular(&features);
        Ok(MdpInstance {
            config: self.config.clone(),
            mdp,
            reward: LinearReward::new(DVector::from_vec(self.omega.clone()), self.f_cap)?,
            reward_table: RewardTable::new(self.num_contexts, self.num_actions, self.true_reward.clone())?,
            mu,
            mu_table,
            features,
        })
    }
}

/// Serialized form of a dataset; caches are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub seed: u64,
    pub kind: crate::domain::DatasetKind,
    pub gamma: f64,
    pub bandit: Vec<BanditRecord>,
    pub trajectories: Vec<TrajectoryRecord>,
    pub phi_diff: MatrixJson,
    pub psi_diff: MatrixJson,
    pub offsets: Option<Vec<f64>>,
}

impl DatasetFile {
    pub fn new(data: &PreferenceDataset, seed: u64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed,
            kind: data.kind,
            gamma: data.gamma,
            bandit: data.bandit.clone(),
            trajectories: data.trajectories.clone(),
            phi_diff: (&data.phi_diff).into(),
            psi_diff: (&data.psi_diff).into(),
            offsets: data.offsets.as_ref().map(|o| o.as_slice().to_vec()),
        }
    }

    pub fn to_dataset(&self) -> Result<PreferenceDataset> {
        Ok(PreferenceDataset {
            kind: self.kind,
            bandit: self.bandit.clone(),
            trajectories: self.trajectories.clone(),
            gamma: self.gamma,
            phi_diff: self.phi_diff.to_matrix()?,
            psi_diff: self.psi_diff.to_matrix()?,
            offsets: self.offsets.clone().map(DVector::from_vec),
        })
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
