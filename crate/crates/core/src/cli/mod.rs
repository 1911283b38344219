//! Experiment runner: configuration, single runs, sweeps, reports, and the command line.

pub mod verify;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::domain::{LinearReward, PreferenceDataset, TabularPolicy};
use crate::dpo::{dpo_pgd, DpoSettings};
use crate::envgen::{
    hash_json, make_bandit_instance, make_mdp_instance, sample_preferences, sample_trajectory_preferences,
    BanditInstance, DatasetFile, InstanceConfig, InstanceFile, MdpInstance, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::mdp;
use crate::metrics::{
    covering_stats, gap_report, mdp_gap_report, oracle_solve, rate_fit, GapReport, LossKind, OracleParams,
    RateModel,
};
use crate::par;
use crate::rlhf::{default_mle_step, gibbs_policy, greedy_policy, mle_pgd, npg_run, NpgSettings};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    Rlhf,
    Dpo,
    Both,
}

impl Paradigm {
    fn expand(self) -> Vec<Paradigm> {
        match self {
            Paradigm::Both => vec![Paradigm::Rlhf, Paradigm::Dpo],
            p => vec![p],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Paradigm::Rlhf => "rlhf",
            Paradigm::Dpo => "dpo",
            Paradigm::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Bandit,
    Mdp,
}

impl Setting {
    fn name(self) -> &'static str {
        match self {
            Setting::Bandit => "bandit",
            Setting::Mdp => "mdp",
        }
    }
}

/// DPO temperature: fixed, or `c·√(d/n)` with `d` the policy feature dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaPolicy {
    Fixed(f64),
    SqrtRule(f64),
}

impl BetaPolicy {
    pub fn resolve(self, dim: usize, n: usize) -> f64 {
        match self {
            BetaPolicy::Fixed(b) => b,
            BetaPolicy::SqrtRule(c) => c * (dim as f64 / n as f64).sqrt(),
        }
    }
}

/// How the loss minimizers are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// High-precision oracle minimizer.
    Exact,
    /// Projected gradient descent with the default step and the iteration budget.
    Gradient,
}

/// How the RLHF policy phase is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicySolver {
    ClosedForm,
    Npg,
}

/// Data use across the two RLHF phases when the policy phase consumes data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Interleaved,
    Reuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub reward_iters: usize,
    pub policy_iters: usize,
    pub dpo_iters: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            reward_iters: 2000,
            policy_iters: 60,
            dpo_iters: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub instance: InstanceConfig,
    pub paradigm: Paradigm,
    pub setting: Setting,
    pub n_grid: Vec<usize>,
    pub beta_policy: BetaPolicy,
    /// RLHF policy-phase temperature; defaults to `instance.beta`. Zero selects the greedy policy.
    pub rlhf_beta: Option<f64>,
    pub seeds: Vec<u64>,
    pub solver: Solver,
    pub policy_solver: PolicySolver,
    pub split: Split,
    pub budgets: Budgets,
    /// Ridge for covering numbers; defaults to `1/n`.
    pub lambda: Option<f64>,
    pub timeout_secs: f64,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            instance: InstanceConfig::default(),
            paradigm: Paradigm::Both,
            setting: Setting::Bandit,
            n_grid: vec![256],
            beta_policy: BetaPolicy::Fixed(1.0),
            rlhf_beta: None,
            seeds: vec![0],
            solver: Solver::Exact,
            policy_solver: PolicySolver::ClosedForm,
            split: Split::Interleaved,
            budgets: Budgets::default(),
            lambda: None,
            timeout_secs: 120.0,
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(Error::Config("n_grid must be nonempty with positive sizes".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let Some(b) = self.rlhf_beta {
            if !(b >= 0.0) {
                return Err(Error::Config("rlhf_beta must be nonnegative".into()));
            }
            if b == 0.0 && self.policy_solver == PolicySolver::Npg {
                return Err(Error::Config("natural gradient needs rlhf_beta > 0".into()));
            }
        }
        if self.policy_solver == PolicySolver::Npg && self.setting == Setting::Mdp {
            return Err(Error::Config("natural gradient is bandit-only".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Instance configuration for a run seed; independent of `n`.
    pub fn instance_for(&self, seed: u64) -> InstanceConfig {
        InstanceConfig {
            seed: derive_seed(&[self.instance.seed, seed]),
            ..self.instance.clone()
        }
    }

    /// Run points in sweep order: `n`, then seed, then paradigm.
    pub fn points(&self) -> Vec<RunPoint> {
        let mut out = Vec::new();
        for &n in &self.n_grid {
            for &seed in &self.seeds {
                for paradigm in self.paradigm.expand() {
                    out.push(RunPoint { paradigm, n, seed });
                }
            }
        }
        out
    }
}

/// One row of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunPoint {
    pub paradigm: Paradigm,
    pub n: usize,
    pub seed: u64,
}

/// Output record of [`run_single`]. Numeric fields are empty when the run failed before computing them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub schema_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub paradigm: String,
    pub setting: String,
    pub n: usize,
    pub d_r: usize,
    pub d_p: usize,
    pub d_m: usize,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub g: Option<f64>,
    pub g_reg: Option<f64>,
    pub d: Option<f64>,
    pub lambda_r: Option<f64>,
    pub lambda_p: Option<f64>,
    pub final_loss: Option<f64>,
    pub final_grad_norm: Option<f64>,
    pub iters: Option<usize>,
    pub wall_ms: f64,
    pub flow_residual: Option<f64>,
    pub warn_flags: String,
    pub error: String,
    pub instance_hash: String,
}

/// CSV column order; new columns go at the end.
pub const CSV_COLUMNS: [&str; 24] = [
    "schema_version",
    "run_id",
    "seed",
    "paradigm",
    "setting",
    "n",
    "d_r",
    "d_p",
    "d_m",
    "beta",
    "lambda",
    "g",
    "g_reg",
    "d",
    "lambda_r",
    "lambda_p",
    "final_loss",
    "final_grad_norm",
    "iters",
    "wall_ms",
    "flow_residual",
    "warn_flags",
    "error",
    "instance_hash",
];

/// Float with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        !self.error.is_empty()
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.schema_version.to_string(),
            self.run_id.clone(),
            self.seed.to_string(),
            self.paradigm.clone(),
            self.setting.clone(),
            self.n.to_string(),
            self.d_r.to_string(),
            self.d_p.to_string(),
            self.d_m.to_string(),
            opt_float(self.beta),
            opt_float(self.lambda),
            opt_float(self.g),
            opt_float(self.g_reg),
            opt_float(self.d),
            opt_float(self.lambda_r),
            opt_float(self.lambda_p),
            opt_float(self.final_loss),
            opt_float(self.final_grad_norm),
            self.iters.map(|i| i.to_string()).unwrap_or_default(),
            format_float(self.wall_ms),
            opt_float(self.flow_residual),
            self.warn_flags.clone(),
            self.error.clone(),
            self.instance_hash.clone(),
        ]
    }

    /// CSV fields other than wall-clock time.
    pub fn deterministic_fields(&self) -> Vec<String> {
        let mut f = self.csv_fields();
        f.remove(CSV_COLUMNS.iter().position(|c| *c == "wall_ms").expect("column"));
        f
    }
}

/// Writes rows with a header to `path` via a temporary file and rename.
pub fn write_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(CSV_COLUMNS)?;
        for r in rows {
            w.write_record(r.csv_fields())?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Default)]
struct Measured {
    beta: Option<f64>,
    lambda: Option<f64>,
    gaps: Option<GapReport>,
    lambda_r: Option<f64>,
    lambda_p: Option<f64>,
    final_loss: Option<f64>,
    final_grad_norm: Option<f64>,
    iters: Option<usize>,
    flow_residual: Option<f64>,
    warn: Vec<&'static str>,
    instance_hash: String,
    dims: (usize, usize, usize),
}

struct Deadline {
    start: Instant,
    limit: f64,
}

impl Deadline {
    fn check(&self, phase: &str) -> Result<()> {
        let elapsed = self.start.elapsed().as_secs_f64();
        if elapsed > self.limit {
            return Err(Error::Config(format!(
                "timeout after {elapsed:.1} s in {phase} (limit {} s)",
                self.limit
            )));
        }
        Ok(())
    }
}

/// Fitted loss parameter with solver diagnostics.
struct Fit {
    w: DVector<f64>,
    loss: f64,
    grad_norm: f64,
    iters: usize,
}

fn fit_loss(
    cfg: &ExperimentConfig,
    kind: LossKind,
    data: &PreferenceDataset,
    cap: f64,
    beta: f64,
    warn: &mut Vec<&'static str>,
) -> Result<Fit> {
    match cfg.solver {
        Solver::Exact => {
            let sol = oracle_solve(kind, data, &OracleParams { cap, beta, start: None })?;
            if sol.precision_warning {
                warn.push("precision");
            }
            if sol.on_boundary {
                warn.push("boundary");
            }
            Ok(Fit {
                w: sol.w,
                loss: sol.loss,
                grad_norm: sol.grad_norm,
                iters: 0,
            })
        }
        Solver::Gradient => {
            let d = match kind {
                LossKind::Mle => data.phi_diff.ncols(),
                _ => data.psi_diff.ncols(),
            };
            let zero = DVector::zeros(d);
            let (w, loss, grad_norm, iters) = match kind {
                LossKind::Mle => {
                    let trace = mle_pgd(data, cap, default_mle_step(cap), cfg.budgets.reward_iters, &zero)?;
                    let last = trace.last().expect("nonempty trace");
                    (last.omega.clone(), last.loss, last.grad_norm, last.t)
                }
                _ => {
                    let settings = DpoSettings {
                        beta,
                        b_cap: cap,
                        eta: None,
                        iters: cfg.budgets.dpo_iters,
                    };
                    let trace = dpo_pgd(data, settings, &zero, None)?;
                    let last = trace.last().expect("nonempty trace");
                    (last.theta.clone(), last.loss, last.grad_norm, last.t)
                }
            };
            Ok(Fit { w, loss, grad_norm, iters })
        }
    }
}

fn run_bandit(cfg: &ExperimentConfig, point: &RunPoint, m: &mut Measured, deadline: &Deadline) -> Result<()> {
    let inst = make_bandit_instance(&cfg.instance_for(point.seed))?;
    m.instance_hash = inst.hash();
    let data = sample_preferences(&inst, point.n, derive_seed(&[point.seed, point.n as u64]))?;
    let lambda = cfg.lambda.unwrap_or(1.0 / point.n as f64);
    m.lambda = Some(lambda);
    let cover = covering_stats(&data, lambda)?;
    m.lambda_r = Some(cover.cover_reward);
    m.lambda_p = Some(cover.cover_policy);
    deadline.check("data")?;
    let policy = match point.paradigm {
        Paradigm::Rlhf => rlhf_bandit_policy(cfg, &inst, &data, m, deadline)?,
        _ => {
            let beta = cfg.beta_policy.resolve(inst.config.d_p, point.n);
            m.beta = Some(beta);
            let fit = fit_loss(cfg, LossKind::Dpo, &data, inst.config.b_cap, beta, &mut m.warn)?;
            record_fit(m, &fit);
            crate::metrics::loglinear_table(&fit.w, &inst.features)
        }
    };
    deadline.check("policy")?;
    m.gaps = Some(gap_report(&policy, &inst, m.beta.unwrap_or(0.0))?);
    Ok(())
}

fn record_fit(m: &mut Measured, fit: &Fit) {
    m.final_loss = Some(fit.loss);
    m.final_grad_norm = Some(fit.grad_norm);
    m.iters = Some(fit.iters);
}

fn rlhf_beta(cfg: &ExperimentConfig) -> f64 {
    cfg.rlhf_beta.unwrap_or(cfg.instance.beta)
}

fn rlhf_bandit_policy(
    cfg: &ExperimentConfig,
    inst: &BanditInstance,
    data: &PreferenceDataset,
    m: &mut Measured,
    deadline: &Deadline,
) -> Result<TabularPolicy> {
    let beta = rlhf_beta(cfg);
    m.beta = Some(beta);
    // The closed-form policy phase reads no data, so the reward phase gets all of it.
    let (reward_data, policy_data) = match (cfg.policy_solver, cfg.split) {
        (PolicySolver::Npg, Split::Interleaved) if data.len() >= 2 => {
            let (a, b) = data.split_interleaved();
            (a, Some(b))
        }
        (PolicySolver::Npg, _) => (data.clone(), Some(data.clone())),
        (PolicySolver::ClosedForm, _) => (data.clone(), None),
    };
    let fit = fit_loss(cfg, LossKind::Mle, &reward_data, inst.config.f_cap, 0.0, &mut m.warn)?;
    record_fit(m, &fit);
    deadline.check("reward")?;
    let r_hat = LinearReward::new(fit.w.clone(), inst.config.f_cap)?.table(&inst.features);
    match policy_data {
        None if beta == 0.0 => Ok(greedy_policy(&r_hat)),
        None => Ok(gibbs_policy(&r_hat, &inst.mu_table, beta)?.policy),
        Some(pd) => {
            let settings = NpgSettings {
                beta,
                eta_prime: None,
                iters: cfg.budgets.policy_iters,
            };
            let run = npg_run(&pd, &inst.features, &r_hat, &inst.mu_table, settings, &inst.mu.theta)?;
            if run.rank_deficient {
                m.warn.push("rank_deficient");
            }
            let last = run.states.last().expect("nonempty trace");
            Ok(crate::metrics::loglinear_table(&last.theta, &inst.features))
        }
    }
}

fn run_mdp(cfg: &ExperimentConfig, point: &RunPoint, m: &mut Measured, deadline: &Deadline) -> Result<()> {
    let inst = make_mdp_instance(&cfg.instance_for(point.seed))?;
    m.instance_hash = inst.hash();
    m.dims.2 = inst.features.d_m();
    let data = sample_trajectory_preferences(&inst, point.n, derive_seed(&[point.seed, point.n as u64]))?;
    let lambda = cfg.lambda.unwrap_or(1.0 / point.n as f64);
    m.lambda = Some(lambda);
    let cover = covering_stats(&data, lambda)?;
    m.lambda_r = Some(cover.cover_reward);
    m.lambda_p = Some(cover.cover_policy);
    deadline.check("data")?;
    let policy = match point.paradigm {
        Paradigm::Rlhf => rlhf_mdp_policy(cfg, &inst, &data, m)?,
        _ => {
            let beta = cfg.beta_policy.resolve(inst.features.d_m(), point.n);
            m.beta = Some(beta);
            let fit = fit_loss(cfg, LossKind::DpoMdp, &data, inst.config.b_occ_cap, beta, &mut m.warn)?;
            record_fit(m, &fit);
            let d_theta = mdp::loglinear_occupancy(&fit.w, &inst.features)?;
            m.flow_residual = Some(mdp::flow_residual(&d_theta, &inst.mdp).amax());
            mdp::policy_from_occupancy(&d_theta)?
        }
    };
    deadline.check("policy")?;
    let occ = mdp::occupancy_of_policy(&policy, &inst.mdp)?;
    m.gaps = Some(mdp_gap_report(&occ, &inst, m.beta.unwrap_or(0.0))?);
    Ok(())
}

fn rlhf_mdp_policy(
    cfg: &ExperimentConfig,
    inst: &MdpInstance,
    data: &PreferenceDataset,
    m: &mut Measured,
) -> Result<TabularPolicy> {
    let beta = rlhf_beta(cfg);
    m.beta = Some(beta);
    let fit = fit_loss(cfg, LossKind::Mle, data, inst.config.f_cap, 0.0, &mut m.warn)?;
    record_fit(m, &fit);
    let r_hat = LinearReward::new(fit.w.clone(), inst.config.f_cap)?.table(&inst.features);
    if beta == 0.0 {
        return mdp::optimal_policy(&inst.mdp, &r_hat);
    }
    let d_mu = mdp::occupancy_of_policy(&inst.mu_table, &inst.mdp)?;
    let (d_star, _) = mdp::solve_regularized_occupancy(&r_hat, &d_mu, beta, &inst.mdp)?;
    mdp::policy_from_occupancy(&d_star)
}

/// Trains one paradigm at one `(n, seed)` and evaluates it against the instance ground truth.
pub fn run_single(cfg: &ExperimentConfig, point: &RunPoint) -> ResultRow {
    let deadline = Deadline {
        start: Instant::now(),
        limit: cfg.timeout_secs,
    };
    let mut m = Measured {
        dims: (cfg.instance.d_r, cfg.instance.d_p, cfg.instance.d_m),
        ..Measured::default()
    };
    let outcome = match point.paradigm {
        Paradigm::Both => Err(Error::Config("run_single takes one paradigm".into())),
        _ => match cfg.setting {
            Setting::Bandit => run_bandit(cfg, point, &mut m, &deadline),
            Setting::Mdp => run_mdp(cfg, point, &mut m, &deadline),
        },
    };
    let wall_ms = deadline.start.elapsed().as_secs_f64() * 1e3;
    let run_id = format!(
        "{}-{}-n{}-s{}",
        cfg.setting.name(),
        point.paradigm.name(),
        point.n,
        point.seed
    );
    ResultRow {
        schema_version: SCHEMA_VERSION,
        run_id,
        seed: point.seed,
        paradigm: point.paradigm.name().into(),
        setting: cfg.setting.name().into(),
        n: point.n,
        d_r: m.dims.0,
        d_p: m.dims.1,
        d_m: m.dims.2,
        beta: m.beta,
        lambda: m.lambda,
        g: m.gaps.map(|g| g.g),
        g_reg: m.gaps.map(|g| g.g_reg),
        d: m.gaps.map(|g| g.d),
        lambda_r: m.lambda_r,
        lambda_p: m.lambda_p,
        final_loss: m.final_loss,
        final_grad_norm: m.final_grad_norm,
        iters: m.iters,
        wall_ms,
        flow_residual: m.flow_residual,
        warn_flags: m.warn.join(";"),
        error: outcome.err().map(|e| e.to_string()).unwrap_or_default(),
        instance_hash: m.instance_hash,
    }
}

/// Runs every point of the config on `workers` threads, in sweep order.
pub fn sweep(cfg: &ExperimentConfig, workers: usize) -> Vec<ResultRow> {
    let points = cfg.points();
    par::map(&points, par::effective_workers(workers), |p| run_single(cfg, p))
}

/// Manifest written next to a sweep's CSV.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub library_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub workers: usize,
    pub rows: usize,
    pub failed_rows: usize,
}

/// Sweeps, writes `out` and `out.manifest.json`, and returns the rows.
pub fn sweep_to_files(cfg: &ExperimentConfig, workers: usize, out: &Path) -> Result<Vec<ResultRow>> {
    let rows = sweep(cfg, workers);
    write_csv(out, &rows)?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        library_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: hash_json(cfg),
        config: cfg.clone(),
        workers: par::effective_workers(workers),
        rows: rows.len(),
        failed_rows: rows.iter().filter(|r| r.failed()).count(),
    };
    fs::write(manifest_path(out), serde_json::to_string_pretty(&manifest)?)?;
    Ok(rows)
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Median of the finite values.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    Some(if k % 2 == 1 { v[k / 2] } else { 0.5 * (v[k / 2 - 1] + v[k / 2]) })
}

/// Power-law fit of a median metric against `n` for one group of rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeRow {
    pub paradigm: String,
    pub setting: String,
    pub d_r: usize,
    pub d_p: usize,
    pub metric: String,
    pub points: usize,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
}

/// Fits `median(G)` and `median(𝒢)` against `n` per paradigm, setting and dimensions.
pub fn report(csv_path: &Path) -> Result<Vec<SlopeRow>> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Config(format!("CSV lacks column {name}")))
    };
    let (ip, is, ir, id, inn, ig, igr, ie) = (
        col("paradigm")?,
        col("setting")?,
        col("d_r")?,
        col("d_p")?,
        col("n")?,
        col("g")?,
        col("g_reg")?,
        col("error")?,
    );
    type Key = (String, String, usize, usize);
    let mut groups: BTreeMap<Key, BTreeMap<usize, (Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        if !rec[ie].is_empty() {
            continue;
        }
        let parse_usize = |i: usize| rec[i].parse::<usize>().map_err(|e| Error::Config(e.to_string()));
        let parse_f = |i: usize| rec[i].parse::<f64>().map_err(|e| Error::Config(e.to_string()));
        let key = (rec[ip].to_string(), rec[is].to_string(), parse_usize(ir)?, parse_usize(id)?);
        let entry = groups.entry(key).or_default().entry(parse_usize(inn)?).or_default();
        entry.0.push(parse_f(ig)?);
        entry.1.push(parse_f(igr)?);
    }
    let mut out = Vec::new();
    for ((paradigm, setting, d_r, d_p), by_n) in groups {
        for (metric, pick) in [("g", 0usize), ("g_reg", 1)] {
            let series: Vec<(f64, f64)> = by_n
                .iter()
                .filter_map(|(&n, v)| median(if pick == 0 { &v.0 } else { &v.1 }).map(|m| (n as f64, m)))
                .collect();
            let fit = rate_fit(&series, RateModel::Power).ok();
            out.push(SlopeRow {
                paradigm: paradigm.clone(),
                setting: setting.clone(),
                d_r,
                d_p,
                metric: metric.into(),
                points: series.len(),
                slope: fit.map(|f| f.slope),
                r_squared: fit.map(|f| f.r_squared),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Parser)]
#[command(name = "prefopt", version, about = "RLHF and DPO experiments on synthetic preference data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replaces the config's seed list with this seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads; `PREFOPT_DETERMINISTIC=1` forces one.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the instance and a dataset (first `n` of the grid) as JSON into a directory.
    Gen(RunArgs),
    /// Run every grid point for a single seed and write CSV.
    Run(RunArgs),
    /// Run the full grid and write CSV plus a manifest.
    Sweep(RunArgs),
    /// Run a verification suite and print a JSON report.
    Verify {
        /// gradients | constants | spectra | mdp | rates | all
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit log-log slopes of median gaps from a sweep CSV.
    Report {
        csv: PathBuf,
        /// Write the fit table as CSV instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn effective_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.output = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.output
        .clone()
        .ok_or_else(|| Error::Config("no output path: pass --out or set `output`".into()))
}

fn cmd_gen(args: &RunArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let dir = require_out(&cfg)?;
    fs::create_dir_all(&dir)?;
    let seed = cfg.seeds[0];
    let n = cfg.n_grid[0];
    let data_seed = derive_seed(&[seed, n as u64]);
    let (inst, data) = match cfg.setting {
        Setting::Bandit => {
            let inst = make_bandit_instance(&cfg.instance_for(seed))?;
            let data = sample_preferences(&inst, n, data_seed)?;
            (InstanceFile::from_bandit(&inst), data)
        }
        Setting::Mdp => {
            let inst = make_mdp_instance(&cfg.instance_for(seed))?;
            let data = sample_trajectory_preferences(&inst, n, data_seed)?;
            (InstanceFile::from_mdp(&inst), data)
        }
    };
    fs::write(dir.join("instance.json"), serde_json::to_string(&inst)?)?;
    fs::write(dir.join("dataset.json"), serde_json::to_string(&DatasetFile::new(&data, data_seed))?)?;
    Ok(())
}

fn cmd_sweep(args: &RunArgs) -> Result<bool> {
    let cfg = effective_config(args)?;
    let out = require_out(&cfg)?;
    let workers = args.workers.unwrap_or_else(par::default_workers);
    let rows = sweep_to_files(&cfg, workers, &out)?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    eprintln!("{} rows written to {}, {failed} failed", rows.len(), out.display());
    Ok(failed == 0)
}

fn cmd_run(args: &RunArgs) -> Result<bool> {
    let mut cfg = effective_config(args)?;
    cfg.seeds.truncate(1);
    let out = require_out(&cfg)?;
    let workers = args.workers.unwrap_or(1);
    let rows = sweep(&cfg, workers);
    write_csv(&out, &rows)?;
    Ok(rows.iter().all(|r| !r.failed()))
}

fn cmd_report(csv: &Path, out: Option<&Path>) -> Result<()> {
    let rows = report(csv)?;
    match out {
        Some(p) => {
            let mut w = csv::Writer::from_path(p)?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut h = stdout.lock();
            writeln!(h, "paradigm,setting,d_r,d_p,metric,points,slope,r_squared")?;
            for r in &rows {
                writeln!(
                    h,
                    "{},{},{},{},{},{},{},{}",
                    r.paradigm,
                    r.setting,
                    r.d_r,
                    r.d_p,
                    r.metric,
                    r.points,
                    opt_float(r.slope),
                    opt_float(r.r_squared)
                )?;
            }
        }
    }
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64, out: Option<&Path>) -> Result<bool> {
    let report = verify::run_suite(suite, seed)?;
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    Ok(report.passed())
}

/// Parses arguments and runs the command. Exit status 1 means failed rows or
/// checks; 2 means a usage or configuration error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a).map(|_| true),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Verify { suite, seed, out } => cmd_verify(suite, *seed, out.as_deref()),
        Command::Report { csv, out } => cmd_report(csv, out.as_deref()).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(paradigm: Paradigm) -> ExperimentConfig {
        ExperimentConfig {
            instance: InstanceConfig {
                x: 5,
                y: 6,
                d_r: 3,
                d_p: 4,
                ..InstanceConfig::default()
            },
            paradigm,
            n_grid: vec![64],
            seeds: vec![1],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_defaults_round_trip() {
        let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let text = serde_json::to_string(&small(Paradigm::Dpo)).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), small(Paradigm::Dpo));
        let sqrt = ExperimentConfig::from_json(r#"{"beta_policy": {"sqrt_rule": 2.0}}"#).unwrap();
        assert_eq!(sqrt.beta_policy, BetaPolicy::SqrtRule(2.0));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 9}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"seeds": [1, 1]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n_grid": []}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"rlhf_beta": 0.0, "policy_solver": "npg"}"#).is_err());
    }

    #[test]
    fn sqrt_rule_resolution() {
        for n in [128, 1000, 8192] {
            let b = BetaPolicy::SqrtRule(1.0).resolve(8, n);
            assert!((b - (8.0 / n as f64).sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn point_counts() {
        let mut cfg = small(Paradigm::Both);
        assert_eq!(cfg.points().len(), 2);
        cfg.paradigm = Paradigm::Rlhf;
        assert_eq!(cfg.points().len(), 1);
        cfg.paradigm = Paradigm::Both;
        cfg.n_grid = vec![128, 256, 512, 1024, 2048, 4096, 8192];
        cfg.seeds = (0..20).collect();
        assert_eq!(cfg.points().len(), 280);
    }

    #[test]
    fn rows_share_instance_and_repeat_exactly() {
        let cfg = small(Paradigm::Both);
        let rows = sweep(&cfg, 1);
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.failed()));
        assert_eq!(rows[0].instance_hash, rows[1].instance_hash);
        let again = sweep(&cfg, 2);
        for (a, b) in rows.iter().zip(&again) {
            assert_eq!(a.deterministic_fields(), b.deterministic_fields());
        }
    }

    #[test]
    fn errors_become_flagged_rows() {
        let mut cfg = small(Paradigm::Rlhf);
        cfg.instance.d_p = 1; // nested features need d_P ≥ d_R
        let row = run_single(&cfg, &cfg.points()[0]);
        assert!(row.failed() && row.g.is_none());
        assert_eq!(row.csv_fields().len(), CSV_COLUMNS.len());
    }

    #[test]
    fn gradient_solver_and_npg_paths() {
        let mut cfg = small(Paradigm::Both);
        cfg.solver = Solver::Gradient;
        cfg.budgets = Budgets {
            reward_iters: 50,
            policy_iters: 5,
            dpo_iters: 50,
        };
        cfg.policy_solver = PolicySolver::Npg;
        let rows = sweep(&cfg, 1);
        assert!(rows.iter().all(|r| !r.failed()), "{:?}", rows);
        assert_eq!(rows[0].iters, Some(50));
        assert!(rows[0].warn_flags.contains("rank_deficient"));
    }

    #[test]
    fn mdp_rows() {
        let mut cfg = small(Paradigm::Both);
        cfg.setting = Setting::Mdp;
        cfg.instance.x = 4;
        cfg.instance.y = 3;
        cfg.instance.gamma = 0.5;
        let rows = sweep(&cfg, 1);
        assert!(rows.iter().all(|r| !r.failed()), "{:?}", rows);
        assert!(rows[1].flow_residual.is_some());
        assert_eq!(rows[0].d_m, 3 + 4 + 8);
    }

    #[test]
    fn float_format_keeps_17_digits() {
        let v = 0.1 + 0.2;
        let s = format_float(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
        assert_eq!(s, "3.0000000000000004e-1");
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
