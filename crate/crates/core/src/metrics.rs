//! Error metrics modulo the scaling ambiguity `(h, x) ≡ (h/ᾱ, αx)`, and
//! contraction-rate fitting for convergence curves.

use crate::error::{Error, Result};
use crate::linops::{self, CMatrix, CVector, C64};
use crate::ncvx::Trajectory;

const GRID_POINTS: usize = 257;
const LOG_TOL: f64 = 1e-12;
const MAX_BRACKET_EXPANSIONS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentResult {
    pub alpha: C64,
    pub dist: f64,
}

/// `‖h/ᾱ − h*‖² + ‖αx − x*‖²`, evaluated on the vectors.
pub fn aligned_sq_dist(h: &CVector, x: &CVector, h_star: &CVector, x_star: &CVector, alpha: C64) -> f64 {
    let inv_conj = C64::new(1.0, 0.0) / alpha.conj();
    let dh: f64 = h.iter().zip(h_star.iter()).map(|(p, q)| (p * inv_conj - q).norm_sqr()).sum();
    let dx: f64 = x.iter().zip(x_star.iter()).map(|(p, q)| (p * alpha - q).norm_sqr()).sum();
    dh + dx
}

struct AlignProblem<'a> {
    h: &'a CVector,
    x: &'a CVector,
    h_star: &'a CVector,
    x_star: &'a CVector,
    nh2: f64,
    nx2: f64,
    c_h: C64,
    c_x: C64,
    offset: f64,
}

impl AlignProblem<'_> {
    /// Optimal α on the circle of radius `r = e^t`.
    fn alpha_at(&self, t: f64) -> C64 {
        let r = t.exp();
        let s = self.c_h / r + self.c_x * r;
        if s.norm() == 0.0 {
            return C64::new(r, 0.0);
        }
        C64::from_polar(r, -s.arg())
    }

    /// Closed-form `dist²` on the circle, cheap but cancellation-prone near zero.
    fn coarse(&self, t: f64) -> f64 {
        let r = t.exp();
        let s = self.c_h / r + self.c_x * r;
        self.nh2 / (r * r) + r * r * self.nx2 - 2.0 * s.norm() + self.offset
    }

    fn fine(&self, t: f64) -> f64 {
        aligned_sq_dist(self.h, self.x, self.h_star, self.x_star, self.alpha_at(t))
    }
}

/// Minimizes `‖h/ᾱ − h*‖² + ‖αx − x*‖²` over `α ∈ C \ {0}`.
///
/// The phase is optimal in closed form for every modulus `r`; the remaining
/// scalar problem in `log r` is scanned on a grid and refined by golden-section
/// search around the best grid point.
pub fn align(h: &CVector, x: &CVector, h_star: &CVector, x_star: &CVector) -> Result<AlignmentResult> {
    let k = h.len();
    if x.len() != k || h_star.len() != k || x_star.len() != k {
        return Err(Error::Shape("align: all vectors must have the same length".into()));
    }
    let (nh2, nx2) = (h.norm_squared(), x.norm_squared());
    if nh2 == 0.0 || nx2 == 0.0 {
        return Err(Error::Degenerate("align: estimate has a zero factor".into()));
    }
    let p = AlignProblem {
        h,
        x,
        h_star,
        x_star,
        nh2,
        nx2,
        c_h: h_star.dotc(h),
        c_x: x_star.dotc(x),
        offset: h_star.norm_squared() + x_star.norm_squared(),
    };

    if p.c_h.norm() == 0.0 && p.c_x.norm() == 0.0 {
        let r = (nh2.sqrt() / nx2.sqrt()).sqrt();
        let alpha = C64::new(r, 0.0);
        return Ok(AlignmentResult { alpha, dist: aligned_sq_dist(h, x, h_star, x_star, alpha).max(0.0).sqrt() });
    }

    let (mut lo, mut hi) = (-(1e3f64).ln(), (1e3f64).ln());
    let mut best = 0;
    let mut grid = Vec::with_capacity(GRID_POINTS);
    for expansion in 0..=MAX_BRACKET_EXPANSIONS {
        grid.clear();
        let step = (hi - lo) / (GRID_POINTS - 1) as f64;
        grid.extend((0..GRID_POINTS).map(|i| lo + step * i as f64));
        best = (0..GRID_POINTS)
            .min_by(|&i, &j| p.coarse(grid[i]).total_cmp(&p.coarse(grid[j])))
            .unwrap();
        let at_edge = best == 0 || best == GRID_POINTS - 1;
        if !at_edge || expansion == MAX_BRACKET_EXPANSIONS {
            break;
        }
        let width = hi - lo;
        if best == 0 {
            lo -= width;
        } else {
            hi += width;
        }
    }

    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(GRID_POINTS - 1)];
    let t_star = golden_section(|t| p.fine(t), a, b, LOG_TOL);

    let mut t_best = grid[best];
    let mut f_best = p.fine(t_best);
    let f_star = p.fine(t_star);
    if f_star <= f_best {
        t_best = t_star;
        f_best = f_star;
    }
    Ok(AlignmentResult { alpha: p.alpha_at(t_best), dist: f_best.max(0.0).sqrt() })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

/// `‖h x^H − h* x*^H‖_F / ‖h* x*^H‖_F` from inner products only.
///
/// The estimate is first moved along its gauge orbit towards the truth so the
/// difference splits into `Δh x̃^H + h* Δx^H` with small, directly computed
/// factors, which keeps the result accurate when the error is tiny.
pub fn relative_fro_error(h: &CVector, x: &CVector, h_star: &CVector, x_star: &CVector) -> Result<f64> {
    let k = h.len();
    if x.len() != k || h_star.len() != k || x_star.len() != k {
        return Err(Error::Shape("relative_fro_error: length mismatch".into()));
    }
    let truth = h_star.norm() * x_star.norm();
    if truth == 0.0 {
        return Err(Error::Degenerate("relative_fro_error: zero ground truth".into()));
    }
    let nh2 = h.norm_squared();
    // h̃ = c h with c the least-squares fit of h to h*, x̃ = x / conj(c).
    let c = if nh2 > 0.0 { h.dotc(h_star) / nh2 } else { C64::new(0.0, 0.0) };
    let (h_t, x_t) = if c.norm() > 0.0 {
        (h * c, x / c.conj())
    } else {
        (h.clone(), x.clone())
    };
    let dh = &h_t - h_star;
    let dx = &x_t - x_star;
    // ‖Δh x̃^H + h* Δx^H‖² = ‖Δh‖²‖x̃‖² + ‖h*‖²‖Δx‖² + 2 Re[(Δh^H h*)(Δx^H x̃)]
    let sq = dh.norm_squared() * x_t.norm_squared()
        + h_star.norm_squared() * dx.norm_squared()
        + 2.0 * (dh.dotc(h_star) * dx.dotc(&x_t)).re;
    Ok(sq.max(0.0).sqrt() / truth)
}

/// Frobenius and spectral norms of `Z − Z*`.
pub fn matrix_error(z: &CMatrix, z_star: &CMatrix) -> Result<(f64, f64)> {
    if z.shape() != z_star.shape() {
        return Err(Error::Shape(format!("matrix_error: {:?} vs {:?}", z.shape(), z_star.shape())));
    }
    let d = z - z_star;
    let fro = d.norm();
    if fro == 0.0 {
        return Ok((0.0, 0.0));
    }
    let spectral = linops::svd(&d)?.s.first().copied().unwrap_or(0.0);
    Ok((fro, spectral.min(fro)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RateFit {
    /// Per-iteration contraction factor in `(0, 1]`.
    pub rho: f64,
    pub floor: f64,
    /// Number of curve points in the fitted pre-floor segment.
    pub points: usize,
}

pub const MIN_FIT_POINTS: usize = 20;

/// Fits `e_t ≈ floor + C ρ^t` on the recorded relative errors of a run.
pub fn fit_contraction_rate(traj: &Trajectory, floor_fraction: f64) -> Result<RateFit> {
    let (iters, errs): (Vec<usize>, Vec<f64>) = traj.records.iter().map(|r| (r.iter, r.rel_error)).unzip();
    fit_rate_series(&iters, &errs, floor_fraction)
}

/// Floor = median of the trailing `floor_fraction` of the curve; the rate comes from
/// a least-squares line through `log(e_t − floor)` over the leading segment where the
/// excess stays above ten times the floor.
pub fn fit_rate_series(iters: &[usize], errs: &[f64], floor_fraction: f64) -> Result<RateFit> {
    let n = errs.len();
    if iters.len() != n {
        return Err(Error::Shape("fit_rate_series: iteration and error lengths differ".into()));
    }
    if n < MIN_FIT_POINTS {
        return Err(Error::FitDegenerate(format!("need at least {MIN_FIT_POINTS} points, got {n}")));
    }
    if !(floor_fraction > 0.0 && floor_fraction < 1.0) {
        return Err(Error::Config(format!("floor_fraction must lie in (0, 1), got {floor_fraction}")));
    }
    if errs.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFinite("error curve"));
    }
    let tail_len = ((n as f64 * floor_fraction).ceil() as usize).clamp(1, n);
    let mut tail: Vec<f64> = errs[n - tail_len..].to_vec();
    tail.sort_by(f64::total_cmp);
    let floor = if tail_len % 2 == 1 {
        tail[tail_len / 2]
    } else {
        0.5 * (tail[tail_len / 2 - 1] + tail[tail_len / 2])
    };

    let threshold = 10.0 * floor;
    let seg: Vec<(f64, f64)> = iters
        .iter()
        .zip(errs)
        .take_while(|(_, &e)| e - floor > threshold)
        .filter(|(_, &e)| e - floor > 0.0)
        .map(|(&t, &e)| (t as f64, (e - floor).ln()))
        .collect();
    if seg.len() < 3 {
        return Err(Error::FitDegenerate(format!("only {} points above the floor {floor:e}", seg.len())));
    }
    let len = seg.len() as f64;
    let mean_t = seg.iter().map(|p| p.0).sum::<f64>() / len;
    let mean_l = seg.iter().map(|p| p.1).sum::<f64>() / len;
    let sxx: f64 = seg.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = seg.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_l)).sum();
    if sxx == 0.0 {
        return Err(Error::FitDegenerate("all fitted points share one iteration index".into()));
    }
    let rho = (sxy / sxx).exp().min(1.0);
    if !(rho > 0.0) {
        return Err(Error::FitDegenerate("fitted rate underflowed".into()));
    }
    Ok(RateFit { rho, floor, points: seg.len() })
}

/// First recorded iteration with `rel_error ≤ level`.
pub fn first_iter_at_or_below(traj: &Trajectory, level: f64) -> Option<usize> {
    traj.records.iter().find(|r| r.rel_error <= level).map(|r| r.iter)
}
