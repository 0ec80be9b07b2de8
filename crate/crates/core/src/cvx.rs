//! Convex relaxation on the lifted variable `Z = h x^H`:
//!
//! ```text
//!   g(Z) = Σ_j |b_j^H Z a_j − y_j|² + 2λ‖Z‖_*
//! ```
//!
//! solved by proximal gradient with singular value thresholding, started from `Z = 0`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linops::{self, CMatrix, CVector, C64};
use crate::model::ProblemInstance;
use crate::ncvx::Iterate;

/// Inflation applied to the power-iteration estimate of `‖A‖²` before it sets the step.
pub const OP_NORM_MARGIN: f64 = 1.05;
/// `γ` in the high-probability bound `‖A‖² ≤ 2K log K + γ log m`.
pub const OP_NORM_GAMMA: f64 = 10.0;

const POWER_MAX_ITERS: usize = 1000;
const POWER_REL_TOL: f64 = 1e-9;
const POWER_SEED: u64 = 0x0005_eed0_fa11;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvexConfig {
    pub lambda: f64,
    /// When set, `λ = lambda_scale · σ √(K log m)` per instance and `lambda` is ignored.
    pub lambda_scale: Option<f64>,
    /// Proximal step; `None` means `1/(2 L̂)`.
    pub step: Option<f64>,
    pub max_iters: usize,
    pub rel_obj_tol: f64,
    pub use_acceleration: bool,
}

impl Default for ConvexConfig {
    fn default() -> Self {
        ConvexConfig {
            lambda: 0.0,
            lambda_scale: Some(5.0),
            step: None,
            max_iters: 5000,
            rel_obj_tol: 1e-10,
            use_acceleration: false,
        }
    }
}

impl ConvexConfig {
    pub fn lambda_for(&self, inst: &ProblemInstance) -> f64 {
        match self.lambda_scale {
            Some(c) => c * inst.noise_scale(),
            None => self.lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(c) = self.lambda_scale {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("lambda_scale must be >= 0, got {c}")));
            }
        }
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("step must be positive, got {s}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if !(self.rel_obj_tol >= 0.0) {
            return Err(Error::Config("rel_obj_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvexResult {
    pub z_cvx: CMatrix,
    pub z_rank1: CMatrix,
    /// `g(Z)` at `Z = 0` followed by one entry per iteration.
    pub objective_trace: Vec<f64>,
    pub iters_used: usize,
    pub final_rel_decrease: f64,
    pub lambda: f64,
    pub step: f64,
    /// `‖Z − prox(Z − s∇)‖_F / s` at the returned point.
    pub fixed_point_residual: f64,
}

/// Singular value soft-thresholding, the proximal map of `τ‖·‖_*`.
pub fn svt(mtx: &CMatrix, tau: f64) -> Result<CMatrix> {
    Ok(svt_with_norm(mtx, tau)?.0)
}

/// Thresholded matrix together with its nuclear norm.
fn svt_with_norm(mtx: &CMatrix, tau: f64) -> Result<(CMatrix, f64)> {
    if !(tau >= 0.0) {
        return Err(Error::Config(format!("threshold must be >= 0, got {tau}")));
    }
    let mut dec = linops::svd(mtx)?;
    for s in dec.s.iter_mut() {
        *s = (*s - tau).max(0.0);
    }
    let nuclear = dec.s.iter().sum();
    Ok((dec.reconstruct(), nuclear))
}

/// `σ₁ u₁ v₁^H`, the closest rank-one matrix in Frobenius norm.
pub fn best_rank1(z: &CMatrix) -> Result<CMatrix> {
    Ok(match rank1_factors(z)? {
        Some(f) => &f.h * f.x.adjoint(),
        None => CMatrix::zeros(z.nrows(), z.ncols()),
    })
}

/// Balanced factors `(√σ₁ u₁, √σ₁ v₁)` of the best rank-one approximation, `None` for `Z = 0`.
pub fn rank1_factors(z: &CMatrix) -> Result<Option<Iterate>> {
    let dec = linops::svd(z)?;
    let s1 = dec.s.first().copied().unwrap_or(0.0);
    if s1 == 0.0 {
        return Ok(None);
    }
    let mut u = dec.u.column(0).into_owned();
    let mut v = dec.v.column(0).into_owned();
    linops::fix_phase(&mut u, &mut v);
    let r = C64::from(s1.sqrt());
    Ok(Some(Iterate::new(u * r, v * r)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpNormEstimate {
    /// Estimate of `‖A‖²` (power iteration on `T = A*A`), or the analytic bound when not converged.
    pub estimate: f64,
    /// `2K log K + 10 log m`.
    pub analytic_bound: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub fn analytic_op_norm_bound(k: usize, m: usize) -> f64 {
    let k = k as f64;
    2.0 * k * k.ln() + OP_NORM_GAMMA * (m as f64).ln()
}

/// Power iteration on `T = A*A` from a fixed pseudo-random start.
pub fn estimate_op_norm(inst: &ProblemInstance) -> Result<OpNormEstimate> {
    let k = inst.k;
    let analytic_bound = analytic_op_norm_bound(k, inst.m);
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut z = CMatrix::from_fn(k, k, |_, _| {
        let re: f64 = StandardNormal.sample(&mut rng);
        let im: f64 = StandardNormal.sample(&mut rng);
        C64::new(re, im)
    });
    z /= C64::from(z.norm());
    let mut prev = 0.0;
    for iter in 1..=POWER_MAX_ITERS {
        let w = linops::apply_t(&z, &inst.a, &inst.b)?;
        let est = w.norm();
        if !est.is_finite() {
            return Err(Error::NonFinite("operator norm power iteration"));
        }
        if est == 0.0 {
            return Ok(OpNormEstimate { estimate: 0.0, analytic_bound, converged: true, iterations: iter });
        }
        if (est - prev).abs() <= POWER_REL_TOL * est {
            return Ok(OpNormEstimate { estimate: est, analytic_bound, converged: true, iterations: iter });
        }
        prev = est;
        z = w / C64::from(est);
    }
    Ok(OpNormEstimate { estimate: analytic_bound, analytic_bound, converged: false, iterations: POWER_MAX_ITERS })
}

/// Step `1/(2 L̂)` with `L̂ = OP_NORM_MARGIN · ‖A‖²` estimate.
pub fn auto_step(inst: &ProblemInstance) -> Result<f64> {
    let est = estimate_op_norm(inst)?;
    let l_hat = OP_NORM_MARGIN * est.estimate;
    if !(l_hat > 0.0) {
        return Err(Error::Degenerate("measurement operator is zero".into()));
    }
    Ok(1.0 / (2.0 * l_hat))
}

struct Lifted<'a> {
    inst: &'a ProblemInstance,
    lambda: f64,
}

impl Lifted<'_> {
    fn residual(&self, z: &CMatrix) -> Result<CVector> {
        Ok(linops::apply_a(z, &self.inst.a, &self.inst.b)? - &self.inst.y)
    }

    /// Gradient of the data term: `2 A*(A(Z) − y)`.
    fn data_grad(&self, r: &CVector) -> Result<CMatrix> {
        Ok(linops::apply_a_adjoint(r, &self.inst.a, &self.inst.b)? * C64::from(2.0))
    }

    /// One proximal step from `point` with residual `r`; returns the new point and its nuclear norm.
    fn prox_step(&self, point: &CMatrix, r: &CVector, step: f64) -> Result<(CMatrix, f64)> {
        let g = self.data_grad(r)?;
        svt_with_norm(&(point - g * C64::from(step)), 2.0 * self.lambda * step)
    }
}

/// `g(Z) = ‖A(Z) − y‖² + 2λ‖Z‖_*`.
pub fn convex_objective(z: &CMatrix, inst: &ProblemInstance, lambda: f64) -> Result<f64> {
    let r = linops::apply_a(z, &inst.a, &inst.b)? - &inst.y;
    let nuclear: f64 = linops::svd(z)?.s.iter().sum();
    Ok(r.norm_squared() + 2.0 * lambda * nuclear)
}

/// Proximal gradient `Z ← svt(Z − 2s A*(A(Z) − y), 2λs)` from `Z = 0`.
///
/// Stops after `max_iters` or once the relative objective decrease drops below
/// `rel_obj_tol`. With acceleration, FISTA momentum is used with
/// function-value restart: a momentum step that raises the objective is
/// discarded and the momentum reset, so the next step is a plain proximal step
/// from the last accepted point. Discarded steps count as iterations, are not
/// recorded in the trace, and never trigger the stopping test.
pub fn run_convex(inst: &ProblemInstance, cfg: &ConvexConfig) -> Result<ConvexResult> {
    cfg.validate()?;
    let lambda = cfg.lambda_for(inst);
    let step = match cfg.step {
        Some(s) => s,
        None => auto_step(inst)?,
    };
    let p = Lifted { inst, lambda };
    let k = inst.k;

    let mut z = CMatrix::zeros(k, k);
    let mut r = -inst.y.clone();
    let mut obj = r.norm_squared();
    let mut trace = vec![obj];

    // Momentum state (unused without acceleration).
    let mut y_pt = z.clone();
    let mut r_y = r.clone();
    let mut t_k = 1.0f64;

    let mut rel = f64::INFINITY;
    let mut iters = 0;
    for it in 1..=cfg.max_iters {
        iters = it;
        let (z_new, nuclear) = if cfg.use_acceleration {
            p.prox_step(&y_pt, &r_y, step)?
        } else {
            p.prox_step(&z, &r, step)?
        };
        let r_new = p.residual(&z_new)?;
        let obj_new = r_new.norm_squared() + 2.0 * lambda * nuclear;
        if !obj_new.is_finite() {
            return Err(Error::Divergence { iter: it, reason: "non-finite convex objective".into() });
        }
        if cfg.use_acceleration && obj_new > obj && t_k > 1.0 {
            y_pt = z.clone();
            r_y = r.clone();
            t_k = 1.0;
            continue;
        }
        rel = if obj > 0.0 { (obj - obj_new) / obj } else { 0.0 };
        trace.push(obj_new);

        if cfg.use_acceleration {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
            let beta = C64::from((t_k - 1.0) / t_next);
            y_pt = &z_new + (&z_new - &z) * beta;
            r_y = p.residual(&y_pt)?;
            t_k = t_next;
        }
        z = z_new;
        r = r_new;
        obj = obj_new;

        if rel < cfg.rel_obj_tol {
            break;
        }
    }

    let (z_next, _) = p.prox_step(&z, &r, step)?;
    let fixed_point_residual = (&z - z_next).norm() / step;
    let z_rank1 = best_rank1(&z)?;
    Ok(ConvexResult {
        z_cvx: z,
        z_rank1,
        objective_trace: trace,
        iters_used: iters,
        final_rel_decrease: rel,
        lambda,
        step,
        fixed_point_residual,
    })
}
