//! Config-driven experiment runners: noise sweeps, convergence curves, single
//! runs and leave-one-out diagnostics. Every runner writes CSV files with a
//! header row and 17 significant digits, ordered canonically by
//! `(K, m, σ index, trial, solver)` regardless of scheduling.
//!
//! # Config file
//!
//! A flat TOML file; solver overrides use dotted keys.
//!
//! ```toml
//! kind = "noise-sweep"          # noise-sweep | convergence | single | loo-diagnostic
//! k = [50]
//! m_ratio = 10.0                # or: m = 500 (absolute, shared by every K)
//! sigma = [1e-6, 1e-5, 1e-4, 1e-3]
//! trials = 10
//! base_seed = 2024
//! solver = "both"               # ncvx | cvx | both
//! out_dir = "out/sweep"
//! threads = 4                   # optional
//! allow_large = false           # K > 300 needs this
//! record_timing = false         # adds wall_time_s to trials.csv (breaks byte-identity)
//! floor_fraction = 0.2          # convergence: tail share used for the error floor
//! loo_indices = [1, 300, 600]   # loo-diagnostic; default {1, m/2, m}
//! instance = "inst.bdi"         # single / loo-diagnostic: replay a saved instance
//!
//! ncvx.eta = 0.05
//! ncvx.max_iters = 2000
//! ncvx.lambda_scale = 5.0       # λ = c σ √(K log m); or ncvx.lambda = <absolute>
//! ncvx.grad_tol = 0.0
//! ncvx.init = "spectral"        # spectral | oracle
//! ncvx.record_every = 1
//!
//! cvx.lambda_scale = 5.0        # or cvx.lambda
//! cvx.step = 0.01               # optional, default 1/(2 L̂)
//! cvx.max_iters = 5000
//! cvx.rel_obj_tol = 1e-10
//! cvx.use_acceleration = false
//! ```
//!
//! # Output files
//!
//! * `trials.csv`: `K,m,sigma,trial,seed,solver,rel_error,rel_error_rank1,dist,`
//!   `cvx_ncvx_distance,iterations,min_grad_norm,status` (plus `wall_time_s`
//!   when `record_timing` is set). Not-applicable cells are `NA`; failed
//!   trials carry `failed:<code>` in `status`.
//! * `summary.csv`: `K,m,sigma,solver,trials_ok,trials_failed,mean_rel_error,`
//!   `std_rel_error,mean_dist,std_dist,mean_cvx_ncvx_distance,std_cvx_ncvx_distance`.
//! * `curve_K{K}_m{m}_s{σ index}_t{trial}.csv`: `iter,rel_error,dist,objective,grad_norm`.
//! * `convergence_summary.csv`: `K,m,sigma,trial,seed,rho_hat,floor,iter_to_2x_floor,`
//!   `final_rel_error,iterations,status`.
//! * `convergence_by_k.csv`: `K,m,sigma,fits_ok,mean_rho_hat,mean_floor,mean_iter_to_2x_floor`.
//! * `loo.csv`: `l,iter,loo_to_full,full_to_truth,loo_to_truth`;
//!   `loo_summary.csv`: `l,points,fraction_below,max_loo_to_full`.
//! * `instance.bdi`: the instance used by `single` / `loo-diagnostic`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::cvx::{self, ConvexConfig, ConvexResult};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{self, derive_seed, ProblemInstance, SignalMode};
use crate::ncvx::{self, InitMode, SolverConfig, Trajectory};

/// Largest K accepted without `allow_large`.
pub const DESK_SCALE_MAX_K: usize = 300;
/// Sweeps with more than this share of failed trials should exit non-zero.
pub const MAX_FAILURE_FRACTION: f64 = 0.10;
pub const INSTANCE_FILE: &str = "instance.bdi";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    NoiseSweep,
    Convergence,
    Single,
    LooDiagnostic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SolverChoice {
    Ncvx,
    Cvx,
    #[default]
    Both,
}

impl SolverChoice {
    pub fn ncvx(self) -> bool {
        matches!(self, SolverChoice::Ncvx | SolverChoice::Both)
    }

    pub fn cvx(self) -> bool {
        matches!(self, SolverChoice::Cvx | SolverChoice::Both)
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NcvxOverrides {
    pub lambda: Option<f64>,
    pub lambda_scale: Option<f64>,
    pub eta: Option<f64>,
    pub max_iters: Option<usize>,
    pub grad_tol: Option<f64>,
    pub init: Option<InitMode>,
    pub record_every: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvxOverrides {
    pub lambda: Option<f64>,
    pub lambda_scale: Option<f64>,
    pub step: Option<f64>,
    pub max_iters: Option<usize>,
    pub rel_obj_tol: Option<f64>,
    pub use_acceleration: Option<bool>,
}

fn resolve_lambda(lambda: Option<f64>, scale: Option<f64>, default_scale: Option<f64>) -> Result<(f64, Option<f64>)> {
    match (lambda, scale) {
        (Some(_), Some(_)) => Err(Error::Config("set either lambda or lambda_scale, not both".into())),
        (Some(l), None) => Ok((l, None)),
        (None, Some(c)) => Ok((0.0, Some(c))),
        (None, None) => Ok((0.0, default_scale)),
    }
}

impl NcvxOverrides {
    pub fn resolve(&self) -> Result<SolverConfig> {
        let d = SolverConfig::default();
        let (lambda, lambda_scale) = resolve_lambda(self.lambda, self.lambda_scale, d.lambda_scale)?;
        let cfg = SolverConfig {
            lambda,
            lambda_scale,
            eta: self.eta.unwrap_or(d.eta),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            grad_tol: self.grad_tol.unwrap_or(d.grad_tol),
            init: self.init.unwrap_or(d.init),
            record_every: self.record_every.unwrap_or(d.record_every),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl CvxOverrides {
    pub fn resolve(&self) -> Result<ConvexConfig> {
        let d = ConvexConfig::default();
        let (lambda, lambda_scale) = resolve_lambda(self.lambda, self.lambda_scale, d.lambda_scale)?;
        let cfg = ConvexConfig {
            lambda,
            lambda_scale,
            step: self.step.or(d.step),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            rel_obj_tol: self.rel_obj_tol.unwrap_or(d.rel_obj_tol),
            use_acceleration: self.use_acceleration.unwrap_or(d.use_acceleration),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn default_trials() -> usize {
    1
}

fn default_floor_fraction() -> f64 {
    0.2
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub kind: Option<ExperimentKind>,
    pub k: Vec<usize>,
    /// Absolute sample count shared by every K.
    pub m: Option<usize>,
    /// `m = ceil(m_ratio · K)`.
    pub m_ratio: Option<f64>,
    pub sigma: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub solver: SolverChoice,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    #[serde(default)]
    pub allow_large: bool,
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_floor_fraction")]
    pub floor_fraction: f64,
    #[serde(default)]
    pub loo_indices: Vec<usize>,
    pub instance: Option<PathBuf>,
    #[serde(default)]
    pub ncvx: NcvxOverrides,
    #[serde(default)]
    pub cvx: CvxOverrides,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn m_for(&self, k: usize) -> Result<usize> {
        let m = match (self.m, self.m_ratio) {
            (Some(m), None) => m,
            (None, Some(c)) if c > 0.0 && c.is_finite() => (c * k as f64).ceil() as usize,
            (None, Some(c)) => return Err(Error::Config(format!("m_ratio must be positive, got {c}"))),
            (Some(_), Some(_)) => return Err(Error::Config("set either m or m_ratio, not both".into())),
            (None, None) => return Err(Error::Config("one of m or m_ratio is required".into())),
        };
        if m < k {
            return Err(Error::Config(format!("resolved m={m} is smaller than K={k}")));
        }
        Ok(m)
    }

    /// Checks the list/trial invariants and that the file agrees with the requested kind.
    pub fn validate(&self, expected: ExperimentKind) -> Result<()> {
        if let Some(kind) = self.kind {
            if kind != expected {
                return Err(Error::Config(format!("config declares kind {kind:?} but {expected:?} was requested")));
            }
        }
        if self.k.is_empty() || self.sigma.is_empty() {
            return Err(Error::Config("k and sigma lists must be non-empty".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.k.contains(&0) {
            return Err(Error::Config("K values must be positive".into()));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("sigma values must be finite and non-negative".into()));
        }
        for &k in &self.k {
            self.m_for(k)?;
            if k > DESK_SCALE_MAX_K && !self.allow_large {
                return Err(Error::Config(format!(
                    "K={k} exceeds the desk-scale limit {DESK_SCALE_MAX_K}; set allow_large = true"
                )));
            }
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction < 1.0) {
            return Err(Error::Config("floor_fraction must lie in (0, 1)".into()));
        }
        self.ncvx.resolve()?;
        self.cvx.resolve()?;
        Ok(())
    }

    /// Warnings for configurations that are valid but expensive.
    pub fn warnings(&self) -> Vec<String> {
        self.k
            .iter()
            .filter(|&&k| k > DESK_SCALE_MAX_K)
            .map(|k| format!("K={k} is beyond desk scale; expect long runtimes"))
            .collect()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
    }
}

/// Per-trial seed, stable when σ values or trials are appended.
pub fn trial_seed(base: u64, k: usize, m: usize, sigma_index: usize, trial: usize) -> u64 {
    derive_seed(base, &[k as u64, m as u64, sigma_index as u64, trial as u64])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub sigma_index: usize,
    pub trial: usize,
    pub seed: u64,
    pub solver: &'static str,
    /// `‖Z − Z*‖_F / ‖Z*‖_F`; for cvx this is the full `Z_cvx`.
    pub rel_error: Option<f64>,
    /// cvx only: error of the rank-one truncation.
    pub rel_error_rank1: Option<f64>,
    pub dist: Option<f64>,
    /// `‖Z_cvx − Z_ncvx‖_F / ‖Z*‖_F` when both solvers ran.
    pub cvx_ncvx_distance: Option<f64>,
    pub iterations: Option<usize>,
    pub wall_time: f64,
    pub min_grad_norm: Option<f64>,
    /// `None` on success, else the error code.
    pub failure: Option<&'static str>,
}

impl TrialRecord {
    fn blank(k: usize, m: usize, sigma: f64, sigma_index: usize, trial: usize, seed: u64, solver: &'static str) -> Self {
        TrialRecord {
            k,
            m,
            sigma,
            sigma_index,
            trial,
            seed,
            solver,
            rel_error: None,
            rel_error_rank1: None,
            dist: None,
            cvx_ncvx_distance: None,
            iterations: None,
            wall_time: 0.0,
            min_grad_norm: None,
            failure: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.failure.is_none()
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NA".into())
}

fn fmt_opt_usize(v: Option<usize>) -> String {
    v.map(|n| n.to_string()).unwrap_or_else(|| "NA".into())
}

fn status(failure: Option<&str>) -> String {
    match failure {
        None => "ok".into(),
        Some(code) => format!("failed:{code}"),
    }
}

pub fn trials_csv(records: &[TrialRecord], timing: bool) -> String {
    let mut out = String::from(
        "K,m,sigma,trial,seed,solver,rel_error,rel_error_rank1,dist,cvx_ncvx_distance,iterations,min_grad_norm,status",
    );
    if timing {
        out.push_str(",wall_time_s");
    }
    out.push('\n');
    for r in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.m,
            fmt_f64(r.sigma),
            r.trial,
            r.seed,
            r.solver,
            fmt_opt(r.rel_error),
            fmt_opt(r.rel_error_rank1),
            fmt_opt(r.dist),
            fmt_opt(r.cvx_ncvx_distance),
            fmt_opt_usize(r.iterations),
            fmt_opt(r.min_grad_norm),
            status(r.failure)
        );
        if timing {
            let _ = write!(out, ",{}", fmt_f64(r.wall_time));
        }
        out.push('\n');
    }
    out
}

fn mean_std(vals: &[f64]) -> (Option<f64>, Option<f64>) {
    if vals.is_empty() {
        return (None, None);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (Some(mean), Some(var.sqrt()))
}

/// Outcome of one `(instance, solvers)` evaluation.
#[derive(Clone, Debug)]
pub struct TrialOutput {
    pub records: Vec<TrialRecord>,
    pub trajectory: Option<Trajectory>,
    pub convex: Option<ConvexResult>,
}

/// Runs the selected solvers on one instance and fills the trial records.
pub fn evaluate_instance(
    inst: &ProblemInstance,
    sigma_index: usize,
    trial: usize,
    solver: SolverChoice,
    ncfg: &SolverConfig,
    ccfg: &ConvexConfig,
) -> TrialOutput {
    let (k, m, sigma, seed) = (inst.k, inst.m, inst.sigma, inst.seed);
    let mut records = Vec::new();
    let mut z_ncvx = None;
    let mut trajectory = None;
    let mut convex = None;

    if solver.ncvx() {
        let mut rec = TrialRecord::blank(k, m, sigma, sigma_index, trial, seed, "ncvx");
        let clock = Instant::now();
        match ncvx::run_nonconvex(inst, ncfg) {
            Ok(traj) => {
                let last = *traj.last();
                rec.rel_error = Some(last.rel_error);
                rec.dist = Some(last.dist);
                rec.iterations = Some(traj.iters_run);
                rec.min_grad_norm = Some(traj.min_grad().grad_norm);
                z_ncvx = Some(&traj.final_iterate.h * traj.final_iterate.x.adjoint());
                trajectory = Some(traj);
            }
            Err(e) => rec.failure = Some(e.code()),
        }
        rec.wall_time = clock.elapsed().as_secs_f64();
        records.push(rec);
    }

    if solver.cvx() {
        let mut rec = TrialRecord::blank(k, m, sigma, sigma_index, trial, seed, "cvx");
        let clock = Instant::now();
        let outcome = cvx::run_convex(inst, ccfg).and_then(|res| {
            let truth = inst.truth_matrix();
            let tn = truth.norm();
            rec.rel_error = Some((&res.z_cvx - &truth).norm() / tn);
            rec.rel_error_rank1 = Some((&res.z_rank1 - &truth).norm() / tn);
            rec.dist = match cvx::rank1_factors(&res.z_cvx)? {
                Some(f) => Some(metrics::align(&f.h, &f.x, &inst.h_star, &inst.x_star)?.dist),
                None => Some(inst.h_star.norm_squared().max(0.0).sqrt().hypot(inst.x_star.norm())),
            };
            rec.iterations = Some(res.iters_used);
            Ok(res)
        });
        match outcome {
            Ok(res) => convex = Some(res),
            Err(e) => rec.failure = Some(e.code()),
        }
        rec.wall_time = clock.elapsed().as_secs_f64();
        records.push(rec);
    }

    if let (Some(zn), Some(res)) = (&z_ncvx, &convex) {
        let d = (&res.z_cvx - zn).norm() / inst.truth_matrix().norm();
        for r in records.iter_mut() {
            r.cvx_ncvx_distance = Some(d);
        }
    }
    TrialOutput { records, trajectory, convex }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepAggregate {
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub solver: &'static str,
    pub trials_ok: usize,
    pub trials_failed: usize,
    pub mean_rel_error: Option<f64>,
    pub std_rel_error: Option<f64>,
    pub mean_dist: Option<f64>,
    pub std_dist: Option<f64>,
    pub mean_cvx_ncvx_distance: Option<f64>,
    pub std_cvx_ncvx_distance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<SweepAggregate>,
}

impl SweepSummary {
    pub fn failure_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| !r.ok()).count() as f64 / self.records.len() as f64
    }

    pub fn aggregate(&self, k: usize, sigma: f64, solver: &str) -> Option<&SweepAggregate> {
        self.aggregates.iter().find(|a| a.k == k && a.sigma == sigma && a.solver == solver)
    }
}

fn aggregate(records: &[TrialRecord]) -> Vec<SweepAggregate> {
    let mut keys: Vec<(usize, usize, usize, f64, &'static str)> = Vec::new();
    for r in records {
        let key = (r.k, r.m, r.sigma_index, r.sigma, r.solver);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(k, m, si, sigma, solver)| {
            let group: Vec<&TrialRecord> = records
                .iter()
                .filter(|r| r.k == k && r.m == m && r.sigma_index == si && r.solver == solver)
                .collect();
            let ok: Vec<&&TrialRecord> = group.iter().filter(|r| r.ok()).collect();
            let errs: Vec<f64> = ok.iter().filter_map(|r| r.rel_error).collect();
            let dists: Vec<f64> = ok.iter().filter_map(|r| r.dist).collect();
            let gaps: Vec<f64> = ok.iter().filter_map(|r| r.cvx_ncvx_distance).collect();
            let (mean_rel_error, std_rel_error) = mean_std(&errs);
            let (mean_dist, std_dist) = mean_std(&dists);
            let (mean_cvx_ncvx_distance, std_cvx_ncvx_distance) = mean_std(&gaps);
            SweepAggregate {
                k,
                m,
                sigma,
                solver,
                trials_ok: ok.len(),
                trials_failed: group.len() - ok.len(),
                mean_rel_error,
                std_rel_error,
                mean_dist,
                std_dist,
                mean_cvx_ncvx_distance,
                std_cvx_ncvx_distance,
            }
        })
        .collect()
}

pub fn summary_csv(aggs: &[SweepAggregate]) -> String {
    let mut out = String::from(
        "K,m,sigma,solver,trials_ok,trials_failed,mean_rel_error,std_rel_error,mean_dist,std_dist,mean_cvx_ncvx_distance,std_cvx_ncvx_distance\n",
    );
    for a in aggs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            a.k,
            a.m,
            fmt_f64(a.sigma),
            a.solver,
            a.trials_ok,
            a.trials_failed,
            fmt_opt(a.mean_rel_error),
            fmt_opt(a.std_rel_error),
            fmt_opt(a.mean_dist),
            fmt_opt(a.std_dist),
            fmt_opt(a.mean_cvx_ncvx_distance),
            fmt_opt(a.std_cvx_ncvx_distance)
        );
    }
    out
}

#[derive(Clone, Copy, Debug)]
struct Task {
    k: usize,
    m: usize,
    sigma_index: usize,
    sigma: f64,
    trial: usize,
    seed: u64,
}

fn tasks(spec: &ExperimentSpec) -> Result<Vec<Task>> {
    let mut out = Vec::new();
    for &k in &spec.k {
        let m = spec.m_for(k)?;
        for (sigma_index, &sigma) in spec.sigma.iter().enumerate() {
            for trial in 0..spec.trials {
                let seed = trial_seed(spec.base_seed, k, m, sigma_index, trial);
                out.push(Task { k, m, sigma_index, sigma, trial, seed });
            }
        }
    }
    Ok(out)
}

fn failed_records(t: &Task, solver: SolverChoice, code: &'static str) -> Vec<TrialRecord> {
    let mut names = Vec::new();
    if solver.ncvx() {
        names.push("ncvx");
    }
    if solver.cvx() {
        names.push("cvx");
    }
    names
        .into_iter()
        .map(|s| {
            let mut r = TrialRecord::blank(t.k, t.m, t.sigma, t.sigma_index, t.trial, t.seed, s);
            r.failure = Some(code);
            r
        })
        .collect()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

/// Noise sweep: every `(K, m, σ, trial)` instance is solved by the selected
/// solvers with λ from the solver configs (default `5σ√(K log m)`).
pub fn run_noise_sweep(spec: &ExperimentSpec) -> Result<SweepSummary> {
    spec.validate(ExperimentKind::NoiseSweep)?;
    let ncfg = spec.ncvx.resolve()?;
    let ccfg = spec.cvx.resolve()?;
    let tasks = tasks(spec)?;
    let pool = spec.pool()?;
    let per_task: Vec<Vec<TrialRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| match model::generate_instance(t.k, t.m, t.sigma, t.seed, SignalMode::UnitGaussian) {
                Ok(inst) => evaluate_instance(&inst, t.sigma_index, t.trial, spec.solver, &ncfg, &ccfg).records,
                Err(e) => failed_records(t, spec.solver, e.code()),
            })
            .collect()
    });
    let records: Vec<TrialRecord> = per_task.into_iter().flatten().collect();
    let aggregates = aggregate(&records);

    fs::create_dir_all(&spec.out_dir)?;
    write_file(&spec.out_dir, "trials.csv", &trials_csv(&records, spec.record_timing))?;
    write_file(&spec.out_dir, "summary.csv", &summary_csv(&aggregates))?;
    Ok(SweepSummary { records, aggregates })
}

pub fn curve_csv(traj: &Trajectory) -> String {
    let mut out = String::from("iter,rel_error,dist,objective,grad_norm\n");
    for r in &traj.records {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.iter,
            fmt_f64(r.rel_error),
            fmt_f64(r.dist),
            fmt_f64(r.objective),
            fmt_f64(r.grad_norm)
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRecord {
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub sigma_index: usize,
    pub trial: usize,
    pub seed: u64,
    pub rho_hat: Option<f64>,
    pub floor: Option<f64>,
    /// First recorded iteration with error at most twice the fitted floor.
    pub iter_to_2x_floor: Option<usize>,
    pub final_rel_error: Option<f64>,
    pub iterations: Option<usize>,
    pub failure: Option<&'static str>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceByK {
    pub k: usize,
    pub m: usize,
    pub sigma: f64,
    pub fits_ok: usize,
    pub mean_rho_hat: Option<f64>,
    pub mean_floor: Option<f64>,
    pub mean_iter_to_2x_floor: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvergenceSummary {
    pub records: Vec<ConvergenceRecord>,
    pub by_k: Vec<ConvergenceByK>,
}

impl ConvergenceSummary {
    pub fn failure_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let failed = self.records.iter().filter(|r| r.failure.is_some() && r.failure != Some("fit_degenerate")).count();
        failed as f64 / self.records.len() as f64
    }
}

fn curve_name(t: &Task) -> String {
    format!("curve_K{}_m{}_s{}_t{}.csv", t.k, t.m, t.sigma_index, t.trial)
}

/// Convergence study: nonconvex runs with full error curves and a fitted
/// contraction rate and floor per run.
pub fn run_convergence(spec: &ExperimentSpec) -> Result<ConvergenceSummary> {
    spec.validate(ExperimentKind::Convergence)?;
    let ncfg = spec.ncvx.resolve()?;
    let tasks = tasks(spec)?;
    let pool = spec.pool()?;
    fs::create_dir_all(&spec.out_dir)?;

    let results: Vec<Result<(ConvergenceRecord, String)>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|t| {
                let mut rec = ConvergenceRecord {
                    k: t.k,
                    m: t.m,
                    sigma: t.sigma,
                    sigma_index: t.sigma_index,
                    trial: t.trial,
                    seed: t.seed,
                    rho_hat: None,
                    floor: None,
                    iter_to_2x_floor: None,
                    final_rel_error: None,
                    iterations: None,
                    failure: None,
                };
                let traj = model::generate_instance(t.k, t.m, t.sigma, t.seed, SignalMode::UnitGaussian)
                    .and_then(|inst| ncvx::run_nonconvex(&inst, &ncfg));
                let traj = match traj {
                    Ok(tr) => tr,
                    Err(e) => {
                        rec.failure = Some(e.code());
                        return Ok((rec, String::from("iter,rel_error,dist,objective,grad_norm\n")));
                    }
                };
                rec.final_rel_error = Some(traj.last().rel_error);
                rec.iterations = Some(traj.iters_run);
                match metrics::fit_contraction_rate(&traj, spec.floor_fraction) {
                    Ok(fit) => {
                        rec.rho_hat = Some(fit.rho);
                        rec.floor = Some(fit.floor);
                        rec.iter_to_2x_floor = metrics::first_iter_at_or_below(&traj, 2.0 * fit.floor);
                    }
                    Err(e) => rec.failure = Some(e.code()),
                }
                Ok((rec, curve_csv(&traj)))
            })
            .collect()
    });

    let mut records = Vec::with_capacity(tasks.len());
    for (t, res) in tasks.iter().zip(results) {
        let (rec, curve) = res?;
        write_file(&spec.out_dir, &curve_name(t), &curve)?;
        records.push(rec);
    }

    let mut by_k = Vec::new();
    for &k in &spec.k {
        let m = spec.m_for(k)?;
        for (si, &sigma) in spec.sigma.iter().enumerate() {
            let fits: Vec<&ConvergenceRecord> =
                records.iter().filter(|r| r.k == k && r.sigma_index == si && r.rho_hat.is_some()).collect();
            let mean = |f: &dyn Fn(&ConvergenceRecord) -> Option<f64>| {
                let v: Vec<f64> = fits.iter().filter_map(|r| f(r)).collect();
                mean_std(&v).0
            };
            by_k.push(ConvergenceByK {
                k,
                m,
                sigma,
                fits_ok: fits.len(),
                mean_rho_hat: mean(&|r| r.rho_hat),
                mean_floor: mean(&|r| r.floor),
                mean_iter_to_2x_floor: mean(&|r| r.iter_to_2x_floor.map(|i| i as f64)),
            });
        }
    }

    let mut summary = String::from("K,m,sigma,trial,seed,rho_hat,floor,iter_to_2x_floor,final_rel_error,iterations,status\n");
    for r in &records {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.m,
            fmt_f64(r.sigma),
            r.trial,
            r.seed,
            fmt_opt(r.rho_hat),
            fmt_opt(r.floor),
            fmt_opt_usize(r.iter_to_2x_floor),
            fmt_opt(r.final_rel_error),
            fmt_opt_usize(r.iterations),
            status(r.failure)
        );
    }
    write_file(&spec.out_dir, "convergence_summary.csv", &summary)?;

    let mut per_k = String::from("K,m,sigma,fits_ok,mean_rho_hat,mean_floor,mean_iter_to_2x_floor\n");
    for b in &by_k {
        let _ = writeln!(
            per_k,
            "{},{},{},{},{},{},{}",
            b.k,
            b.m,
            fmt_f64(b.sigma),
            b.fits_ok,
            fmt_opt(b.mean_rho_hat),
            fmt_opt(b.mean_floor),
            fmt_opt(b.mean_iter_to_2x_floor)
        );
    }
    write_file(&spec.out_dir, "convergence_by_k.csv", &per_k)?;
    Ok(ConvergenceSummary { records, by_k })
}

/// Generates the instance for `single`/`loo-diagnostic` (seeded directly by
/// `base_seed`) or loads the configured instance file.
pub fn single_instance(spec: &ExperimentSpec) -> Result<ProblemInstance> {
    if let Some(path) = &spec.instance {
        return model::load_instance(path);
    }
    let k = spec.k[0];
    let m = spec.m_for(k)?;
    model::generate_instance(k, m, spec.sigma[0], spec.base_seed, SignalMode::UnitGaussian)
}

#[derive(Clone, Debug)]
pub struct SingleSummary {
    pub records: Vec<TrialRecord>,
    pub trajectory: Option<Trajectory>,
}

/// One configured run; the instance is saved to `instance.bdi` for replay.
pub fn run_single(spec: &ExperimentSpec) -> Result<SingleSummary> {
    spec.validate(ExperimentKind::Single)?;
    let ncfg = spec.ncvx.resolve()?;
    let ccfg = spec.cvx.resolve()?;
    let inst = single_instance(spec)?;
    fs::create_dir_all(&spec.out_dir)?;
    model::save_instance(&inst, &spec.out_dir.join(INSTANCE_FILE))?;

    let out = evaluate_instance(&inst, 0, 0, spec.solver, &ncfg, &ccfg);
    write_file(&spec.out_dir, "single.csv", &trials_csv(&out.records, spec.record_timing))?;
    if let Some(traj) = &out.trajectory {
        write_file(&spec.out_dir, "single_curve.csv", &curve_csv(traj))?;
    }
    if let Some(code) = out.records.iter().find_map(|r| r.failure) {
        // Re-run to surface the error itself rather than just its code.
        if spec.solver.ncvx() {
            ncvx::run_nonconvex(&inst, &ncfg)?;
        }
        if spec.solver.cvx() {
            cvx::run_convex(&inst, &ccfg)?;
        }
        return Err(Error::Config(format!("single run failed: {code}")));
    }
    Ok(SingleSummary { records: out.records, trajectory: out.trajectory })
}

/// Leave-one-out diagnostic; `loo_indices` defaults to `{1, m/2, m}`.
pub fn run_loo(spec: &ExperimentSpec) -> Result<Vec<ncvx::LooProximity>> {
    spec.validate(ExperimentKind::LooDiagnostic)?;
    let ncfg = spec.ncvx.resolve()?;
    let inst = single_instance(spec)?;
    fs::create_dir_all(&spec.out_dir)?;
    model::save_instance(&inst, &spec.out_dir.join(INSTANCE_FILE))?;

    let ls = if spec.loo_indices.is_empty() {
        vec![1, (inst.m / 2).max(1), inst.m]
    } else {
        spec.loo_indices.clone()
    };
    let prox = ncvx::loo_proximity(&inst, &ncfg, &ls)?;

    let mut curves = String::from("l,iter,loo_to_full,full_to_truth,loo_to_truth\n");
    let mut summary = String::from("l,points,fraction_below,max_loo_to_full\n");
    for p in &prox {
        for pt in &p.points {
            let _ = writeln!(
                curves,
                "{},{},{},{},{}",
                p.l,
                pt.iter,
                fmt_f64(pt.loo_to_full),
                fmt_f64(pt.full_to_truth),
                fmt_f64(pt.loo_to_truth)
            );
        }
        let max = p.points.iter().map(|x| x.loo_to_full).fold(0.0, f64::max);
        let _ = writeln!(summary, "{},{},{},{}", p.l, p.points.len(), fmt_f64(p.fraction_below()), fmt_f64(max));
    }
    write_file(&spec.out_dir, "loo.csv", &curves)?;
    write_file(&spec.out_dir, "loo_summary.csv", &summary)?;
    Ok(prox)
}
