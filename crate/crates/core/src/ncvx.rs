//! Two-stage nonconvex solver: spectral initialization followed by Wirtinger
//! gradient descent on
//!
//! ```text
//!   f(h, x) = Σ_j |b_j^H h x^H a_j − y_j|² + λ‖h‖² + λ‖x‖²
//! ```
//!
//! with a balancing rescale after every step. Also hosts the ground-truth
//! initialized variant and leave-one-out sequences (sample `l` dropped from
//! both the spectral matrix and the loss).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linops::{self, CVector, C64};
use crate::metrics;
use crate::model::ProblemInstance;

/// Objective growth factor (relative to the starting objective) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    Spectral,
    /// Start from the ground truth `(h*, x*)`.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub lambda: f64,
    pub eta: f64,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init: InitMode,
    pub record_every: usize,
    /// When set, `λ = lambda_scale · σ √(K log m)` for each instance and `lambda` is ignored.
    pub lambda_scale: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            lambda: 0.0,
            eta: 0.05,
            max_iters: 2000,
            grad_tol: 0.0,
            init: InitMode::Spectral,
            record_every: 1,
            lambda_scale: Some(5.0),
        }
    }
}

impl SolverConfig {
    pub fn lambda_for(&self, inst: &ProblemInstance) -> f64 {
        match self.lambda_scale {
            Some(c) => c * inst.noise_scale(),
            None => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(c) = self.lambda_scale {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("lambda_scale must be >= 0, got {c}")));
            }
        }
        if self.max_iters == 0 || self.record_every == 0 {
            return Err(Error::Config("max_iters and record_every must be positive".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::Config("grad_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Iterate {
    pub h: CVector,
    pub x: CVector,
}

impl Iterate {
    pub fn new(h: CVector, x: CVector) -> Self {
        Iterate { h, x }
    }

    /// Multiplies `h` by `1/ᾱ` and `x` by `α`, leaving `h x^H` unchanged.
    pub fn gauge(&self, alpha: C64) -> Iterate {
        Iterate { h: &self.h / alpha.conj(), x: &self.x * alpha }
    }
}

/// Wirtinger gradient (derivative with respect to the conjugate variables).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub h: CVector,
    pub x: CVector,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        (self.h.norm_squared() + self.x.norm_squared()).sqrt()
    }
}

/// Loss over all samples, or over all but one.
#[derive(Clone, Copy)]
struct Loss<'a> {
    inst: &'a ProblemInstance,
    lambda: f64,
    skip: Option<usize>,
}

impl Loss<'_> {
    fn residual(&self, it: &Iterate) -> Result<CVector> {
        let mut r = self.inst.measure(&it.h, &it.x)? - &self.inst.y;
        if let Some(l) = self.skip {
            r[l] = C64::new(0.0, 0.0);
        }
        Ok(r)
    }

    fn objective_from(&self, it: &Iterate, r: &CVector) -> f64 {
        r.norm_squared() + self.lambda * (it.h.norm_squared() + it.x.norm_squared())
    }

    fn objective(&self, it: &Iterate) -> Result<f64> {
        let r = self.residual(it)?;
        Ok(self.objective_from(it, &r))
    }

    /// Objective and Wirtinger gradient sharing one residual evaluation:
    /// `∇_h f = A*(r) x + λh`, `∇_x f = A*(r)^H h + λx`.
    fn eval(&self, it: &Iterate) -> Result<(f64, Gradient)> {
        let r = self.residual(it)?;
        let (a, b) = (&self.inst.a, &self.inst.b);
        let gh = linops::adjoint_apply_right(&r, &it.x, a, b)? + &it.h * C64::from(self.lambda);
        let gx = linops::adjoint_h_apply_left(&r, &it.h, a, b)? + &it.x * C64::from(self.lambda);
        Ok((self.objective_from(it, &r), Gradient { h: gh, x: gx }))
    }

    fn spectral_init(&self) -> Result<Iterate> {
        let mut y = self.inst.y.clone();
        if let Some(l) = self.skip {
            y[l] = C64::new(0.0, 0.0);
        }
        if y.iter().all(|c| *c == C64::new(0.0, 0.0)) {
            return Err(Error::Degenerate("spectral initialization with all-zero measurements".into()));
        }
        let m_spec = linops::apply_a_adjoint(&y, &self.inst.a, &self.inst.b)?;
        let top = linops::top_singular_triple(&m_spec, linops::POWER_TOL, linops::POWER_MAX_ITERS)?;
        let scale = C64::from(top.sigma.sqrt());
        Ok(Iterate { h: top.u * scale, x: top.v * scale })
    }
}

/// `f(h, x)` at the given iterate.
pub fn objective(it: &Iterate, inst: &ProblemInstance, lambda: f64) -> Result<f64> {
    Loss { inst, lambda, skip: None }.objective(it)
}

pub fn wirtinger_grad(it: &Iterate, inst: &ProblemInstance, lambda: f64) -> Result<Gradient> {
    Ok(Loss { inst, lambda, skip: None }.eval(it)?.1)
}

/// `(√σ₁ ȟ, √σ₁ x̌)` from the leading singular triple of `M = Σ y_j b_j a_j^H`.
pub fn spectral_init(inst: &ProblemInstance) -> Result<Iterate> {
    Loss { inst, lambda: 0.0, skip: None }.spectral_init()
}

/// Rescales `(h, x)` to equal norms without changing `h x^H`.
pub fn balance(h: CVector, x: CVector, iter: usize) -> Result<Iterate> {
    let (nh, nx) = (h.norm(), x.norm());
    if nh == 0.0 || nx == 0.0 || !nh.is_finite() || !nx.is_finite() {
        return Err(Error::BalancingDegenerate { iter });
    }
    let s = (nx / nh).sqrt();
    Ok(Iterate { h: h * C64::from(s), x: x / C64::from(s) })
}

fn descend(it: &Iterate, g: &Gradient, eta: f64, iter: usize) -> Result<Iterate> {
    let eta = C64::from(eta);
    let h_half = &it.h - &g.h * eta;
    let x_half = &it.x - &g.x * eta;
    balance(h_half, x_half, iter)
}

/// One gradient step followed by balancing.
pub fn gd_step(it: &Iterate, inst: &ProblemInstance, cfg: &SolverConfig) -> Result<Iterate> {
    let g = wirtinger_grad(it, inst, cfg.lambda_for(inst))?;
    descend(it, &g, cfg.eta, 0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// `dist(z^t, z*)` modulo global scaling.
    pub dist: f64,
    pub rel_error: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    GradTol,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<IterRecord>,
    pub final_iterate: Iterate,
    pub iters_run: usize,
    pub lambda: f64,
    /// Index into `records` with the smallest gradient norm.
    pub min_grad_record: usize,
    pub stop: StopReason,
    pub wall_time: Duration,
}

impl Trajectory {
    pub fn last(&self) -> &IterRecord {
        self.records.last().expect("trajectory always holds the initial record")
    }

    pub fn min_grad(&self) -> &IterRecord {
        &self.records[self.min_grad_record]
    }

    /// Equality of everything except wall time.
    pub fn same_path(&self, other: &Trajectory) -> bool {
        self.records == other.records
            && self.final_iterate == other.final_iterate
            && self.iters_run == other.iters_run
            && self.stop == other.stop
    }
}

fn record(inst: &ProblemInstance, it: &Iterate, iter: usize, objective: f64, grad_norm: f64) -> Result<IterRecord> {
    let dist = metrics::align(&it.h, &it.x, &inst.h_star, &inst.x_star)?.dist;
    let rel_error = metrics::relative_fro_error(&it.h, &it.x, &inst.h_star, &inst.x_star)?;
    Ok(IterRecord { iter, dist, rel_error, objective, grad_norm })
}

fn run_loss(loss: Loss<'_>, cfg: &SolverConfig, start: Iterate) -> Result<Trajectory> {
    cfg.validate()?;
    let clock = Instant::now();
    let inst = loss.inst;
    let mut it = start;
    let mut records = Vec::with_capacity(cfg.max_iters / cfg.record_every + 2);
    let mut limit = None;
    let mut stop = StopReason::MaxIters;
    let mut t = 0;
    loop {
        let (f, g) = loss.eval(&it)?;
        let gnorm = g.norm();
        if !f.is_finite() || !gnorm.is_finite() {
            return Err(Error::Divergence { iter: t, reason: "non-finite objective or gradient".into() });
        }
        let cap = *limit.get_or_insert(DIVERGENCE_FACTOR * f);
        if cap > 0.0 && f > cap {
            return Err(Error::Divergence { iter: t, reason: format!("objective {f:e} exceeds {cap:e}") });
        }
        let converged = gnorm <= cfg.grad_tol;
        let done = converged || t == cfg.max_iters;
        if t % cfg.record_every == 0 || done {
            records.push(record(inst, &it, t, f, gnorm)?);
        }
        if done {
            if converged {
                stop = StopReason::GradTol;
            }
            break;
        }
        it = descend(&it, &g, cfg.eta, t)?;
        t += 1;
    }
    let min_grad_record = records
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.grad_norm.total_cmp(&b.1.grad_norm))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(Trajectory {
        records,
        final_iterate: it,
        iters_run: t,
        lambda: loss.lambda,
        min_grad_record,
        stop,
        wall_time: clock.elapsed(),
    })
}

fn initial_iterate(loss: &Loss<'_>, init: InitMode) -> Result<Iterate> {
    match init {
        InitMode::Spectral => loss.spectral_init(),
        InitMode::Oracle => Ok(Iterate::new(loss.inst.h_star.clone(), loss.inst.x_star.clone())),
    }
}

/// Runs gradient descent from the configured initialization.
pub fn run_nonconvex(inst: &ProblemInstance, cfg: &SolverConfig) -> Result<Trajectory> {
    let loss = Loss { inst, lambda: cfg.lambda_for(inst), skip: None };
    let start = initial_iterate(&loss, cfg.init)?;
    run_loss(loss, cfg, start)
}

/// Runs gradient descent from an explicit starting point.
pub fn run_nonconvex_from(inst: &ProblemInstance, cfg: &SolverConfig, start: Iterate) -> Result<Trajectory> {
    if start.h.len() != inst.k || start.x.len() != inst.k {
        return Err(Error::Shape(format!("starting iterate must have length {}", inst.k)));
    }
    run_loss(Loss { inst, lambda: cfg.lambda_for(inst), skip: None }, cfg, start)
}

fn check_loo_index(inst: &ProblemInstance, l: usize) -> Result<usize> {
    if l == 0 || l > inst.m {
        return Err(Error::Config(format!("leave-one-out index must be in 1..={}, got {l}", inst.m)));
    }
    Ok(l - 1)
}

/// Spectral matrix with sample `l` (1-based) removed: `M^(l) = Σ_{j≠l} y_j b_j a_j^H`.
pub fn loo_spectral_matrix(inst: &ProblemInstance, l: usize) -> Result<linops::CMatrix> {
    let skip = check_loo_index(inst, l)?;
    let mut y = inst.y.clone();
    y[skip] = C64::new(0.0, 0.0);
    linops::apply_a_adjoint(&y, &inst.a, &inst.b)
}

/// The leave-one-out sequence for sample `l` (1-based): spectral initialization
/// and gradient descent both use every measurement except the `l`-th.
pub fn run_leave_one_out(inst: &ProblemInstance, cfg: &SolverConfig, l: usize) -> Result<Trajectory> {
    let skip = check_loo_index(inst, l)?;
    let loss = Loss { inst, lambda: cfg.lambda_for(inst), skip: Some(skip) };
    let start = initial_iterate(&loss, cfg.init)?;
    run_loss(loss, cfg, start)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LooProximityPoint {
    pub iter: usize,
    /// `dist(z^{t,(l)}, z̃^t)` where `z̃^t` is the full-data iterate aligned to the truth.
    pub loo_to_full: f64,
    pub full_to_truth: f64,
    pub loo_to_truth: f64,
}

#[derive(Clone, Debug)]
pub struct LooProximity {
    /// 1-based left-out sample.
    pub l: usize,
    pub points: Vec<LooProximityPoint>,
}

impl LooProximity {
    /// Fraction of recorded iterations with `loo_to_full < full_to_truth`.
    pub fn fraction_below(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let n = self.points.iter().filter(|p| p.loo_to_full < p.full_to_truth).count();
        n as f64 / self.points.len() as f64
    }
}

/// Runs the full-data sequence and the leave-one-out sequences for every `l`
/// in lockstep, recording aligned distances every `record_every` iterations.
pub fn loo_proximity(inst: &ProblemInstance, cfg: &SolverConfig, ls: &[usize]) -> Result<Vec<LooProximity>> {
    cfg.validate()?;
    let lambda = cfg.lambda_for(inst);
    let full = Loss { inst, lambda, skip: None };
    let loos = ls
        .iter()
        .map(|&l| Ok((l, Loss { inst, lambda, skip: Some(check_loo_index(inst, l)?) })))
        .collect::<Result<Vec<_>>>()?;

    let mut z = initial_iterate(&full, cfg.init)?;
    let mut zl = loos.iter().map(|(_, loss)| initial_iterate(loss, cfg.init)).collect::<Result<Vec<_>>>()?;
    let mut out: Vec<LooProximity> = ls.iter().map(|&l| LooProximity { l, points: Vec::new() }).collect();

    for t in 0..=cfg.max_iters {
        if t % cfg.record_every == 0 || t == cfg.max_iters {
            let aligned = metrics::align(&z.h, &z.x, &inst.h_star, &inst.x_star)?;
            let z_tilde = z.gauge(aligned.alpha);
            for (k, w) in zl.iter().enumerate() {
                let loo_to_full = metrics::align(&w.h, &w.x, &z_tilde.h, &z_tilde.x)?.dist;
                let loo_to_truth = metrics::align(&w.h, &w.x, &inst.h_star, &inst.x_star)?.dist;
                out[k].points.push(LooProximityPoint { iter: t, loo_to_full, full_to_truth: aligned.dist, loo_to_truth });
            }
        }
        if t == cfg.max_iters {
            break;
        }
        let (_, g) = full.eval(&z)?;
        z = descend(&z, &g, cfg.eta, t)?;
        for (w, (_, loss)) in zl.iter_mut().zip(&loos) {
            let (_, g) = loss.eval(w)?;
            *w = descend(w, &g, cfg.eta, t)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_instance, SignalMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> CVector {
        CVector::from_fn(n, |_, _| {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            C64::new(re, im)
        })
    }

    fn noiseless(k: usize, m: usize, seed: u64) -> ProblemInstance {
        generate_instance(k, m, 0.0, seed, SignalMode::UnitGaussian).unwrap()
    }

    #[test]
    fn gradient_vanishes_at_truth_without_noise() {
        let inst = noiseless(6, 48, 1);
        let truth = Iterate::new(inst.h_star.clone(), inst.x_star.clone());
        let g = wirtinger_grad(&truth, &inst, 0.0).unwrap();
        assert!(g.norm() < 1e-12);
        let lambda = 0.3;
        let g = wirtinger_grad(&truth, &inst, lambda).unwrap();
        assert!((&g.h - &inst.h_star * C64::from(lambda)).norm() < 1e-12);
        assert!((&g.x - &inst.x_star * C64::from(lambda)).norm() < 1e-12);
    }

    #[test]
    fn spectral_init_is_balanced() {
        let inst = generate_instance(10, 120, 0.01, 2, SignalMode::UnitGaussian).unwrap();
        let z0 = spectral_init(&inst).unwrap();
        assert!((z0.h.norm() - z0.x.norm()).abs() <= 1e-12 * z0.h.norm());
    }

    #[test]
    fn spectral_init_rejects_zero_measurements() {
        let mut inst = noiseless(4, 20, 3);
        inst.y.fill(C64::new(0.0, 0.0));
        assert!(matches!(spectral_init(&inst), Err(Error::Degenerate(_))));
    }

    #[test]
    fn balancing_preserves_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_vec(&mut rng, 5) * C64::from(7.0);
        let x = rand_vec(&mut rng, 5) * C64::from(0.01);
        let before = &h * x.adjoint();
        let b = balance(h, x, 0).unwrap();
        assert!((b.h.norm() - b.x.norm()).abs() <= 1e-12 * b.h.norm());
        assert!((&b.h * b.x.adjoint() - &before).norm() <= 1e-12 * before.norm());
        assert!(matches!(balance(CVector::zeros(3), rand_vec(&mut rng, 3), 9), Err(Error::BalancingDegenerate { iter: 9 })));
    }

    #[test]
    fn zero_step_only_balances() {
        let inst = generate_instance(6, 60, 0.01, 5, SignalMode::UnitGaussian).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let it = Iterate::new(rand_vec(&mut rng, 6), rand_vec(&mut rng, 6) * C64::from(3.0));
        let cfg = SolverConfig { eta: 0.0, ..SolverConfig::default() };
        let next = gd_step(&it, &inst, &cfg).unwrap();
        let z0 = &it.h * it.x.adjoint();
        assert!((&next.h * next.x.adjoint() - &z0).norm() <= 1e-12 * z0.norm());
        assert!((next.h.norm() - next.x.norm()).abs() <= 1e-12 * next.h.norm());
    }

    #[test]
    fn stationary_balanced_point_is_fixed() {
        let inst = noiseless(5, 50, 6);
        // Balance the truth first; the rescaled truth is still a zero-residual point.
        let truth = balance(inst.h_star.clone(), inst.x_star.clone(), 0).unwrap();
        let cfg = SolverConfig { lambda_scale: None, lambda: 0.0, ..SolverConfig::default() };
        let next = gd_step(&truth, &inst, &cfg).unwrap();
        assert!((&next.h - &truth.h).norm() < 1e-12);
        assert!((&next.x - &truth.x).norm() < 1e-12);
    }

    #[test]
    fn one_step_from_spectral_init_decreases_objective() {
        let inst = noiseless(20, 200, 7);
        let cfg = SolverConfig { lambda_scale: None, lambda: 0.0, ..SolverConfig::default() };
        let z0 = spectral_init(&inst).unwrap();
        let z1 = gd_step(&z0, &inst, &cfg).unwrap();
        assert!(objective(&z1, &inst, 0.0).unwrap() <= objective(&z0, &inst, 0.0).unwrap());
    }

    #[test]
    fn oracle_init_stays_at_truth() {
        let inst = noiseless(8, 80, 8);
        let cfg = SolverConfig { init: InitMode::Oracle, lambda_scale: None, max_iters: 50, ..SolverConfig::default() };
        let traj = run_nonconvex(&inst, &cfg).unwrap();
        assert!(traj.records.iter().all(|r| r.dist < 1e-12 && r.rel_error < 1e-12));
    }

    #[test]
    fn trajectory_bookkeeping() {
        let inst = generate_instance(6, 60, 1e-3, 9, SignalMode::UnitGaussian).unwrap();
        let cfg = SolverConfig { max_iters: 25, record_every: 4, ..SolverConfig::default() };
        let traj = run_nonconvex(&inst, &cfg).unwrap();
        let iters: Vec<usize> = traj.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![0, 4, 8, 12, 16, 20, 24, 25]);
        let min = traj.records.iter().map(|r| r.grad_norm).fold(f64::INFINITY, f64::min);
        assert_eq!(traj.min_grad().grad_norm, min);
        assert_eq!(traj.iters_run, 25);
        assert!(traj.records.iter().all(|r| r.grad_norm.is_finite()));

        let again = run_nonconvex(&inst, &cfg).unwrap();
        assert!(traj.same_path(&again));
    }

    #[test]
    fn grad_tol_stops_early() {
        let inst = noiseless(5, 60, 10);
        let cfg = SolverConfig { lambda_scale: None, grad_tol: 1e-3, ..SolverConfig::default() };
        let traj = run_nonconvex(&inst, &cfg).unwrap();
        assert_eq!(traj.stop, StopReason::GradTol);
        assert!(traj.last().grad_norm <= 1e-3);
        assert!(traj.iters_run < cfg.max_iters);
    }

    #[test]
    fn huge_step_diverges() {
        let inst = generate_instance(6, 60, 0.0, 11, SignalMode::UnitGaussian).unwrap();
        let cfg = SolverConfig { eta: 50.0, lambda_scale: None, max_iters: 200, ..SolverConfig::default() };
        let err = run_nonconvex(&inst, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::BalancingDegenerate { .. }), "{err}");
    }

    #[test]
    fn loo_spectral_matrix_differs_by_one_term() {
        let inst = generate_instance(4, 30, 0.01, 12, SignalMode::UnitGaussian).unwrap();
        let full = linops::apply_a_adjoint(&inst.y, &inst.a, &inst.b).unwrap();
        for l in [1, 15, 30] {
            let ml = loo_spectral_matrix(&inst, l).unwrap();
            let bl = inst.b.row(l - 1).map(|c| c.conj());
            let al = inst.a.row(l - 1).adjoint();
            let term = bl * al.adjoint() * inst.y[l - 1];
            assert!((&full - &ml - term).norm() < 1e-12);
        }
        assert!(loo_spectral_matrix(&inst, 0).is_err());
        assert!(loo_spectral_matrix(&inst, 31).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let inst = noiseless(3, 12, 13);
        for cfg in [
            SolverConfig { eta: 0.0, ..SolverConfig::default() },
            SolverConfig { max_iters: 0, ..SolverConfig::default() },
            SolverConfig { record_every: 0, ..SolverConfig::default() },
            SolverConfig { lambda_scale: Some(-1.0), ..SolverConfig::default() },
        ] {
            assert!(matches!(run_nonconvex(&inst, &cfg), Err(Error::Config(_))));
        }
    }
}
