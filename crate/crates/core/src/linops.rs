//! Complex dense linear algebra and the bilinear measurement operators.
//!
//! The designs are stored the way they are stacked in the measurement model:
//! `A` is `m × K` with rows `a_j^H`, and `B` is the `m × K` partial DFT with
//! rows `b_j^H`. With that layout
//!
//! ```text
//!   A(Z)_j  = b_j^H Z a_j          = Σ_l (B Z)_{jl} conj(A_{jl})
//!   A*(w)   = Σ_j w_j b_j a_j^H    = B^H diag(w) A
//!   T(Z)    = A*(A(Z))
//! ```
//!
//! `B` products never materialize the DFT in fast mode: `B v` is a zero-padded
//! length-`m` forward transform and `B^H w` the first `K` outputs of an inverse
//! transform, both scaled by `1/√m`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

/// Iteration cap handed to the dense SVD routine.
const SVD_MAX_ITERS: usize = 100_000;

/// Default power-iteration tolerance for [`top_singular_triple`].
pub const POWER_TOL: f64 = 1e-10;
/// Default power-iteration budget for [`top_singular_triple`].
pub const POWER_MAX_ITERS: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DftMode {
    /// Products computed with length-`m` FFTs (any `m`, Bluestein for awkward sizes).
    Fast,
    /// The `m × K` matrix is materialized and products are dense.
    Dense,
}

/// First `K` columns of the unitary `m × m` DFT matrix.
#[derive(Clone)]
pub struct PartialDft {
    m: usize,
    k: usize,
    mode: DftMode,
    scale: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    dense: Option<CMatrix>,
}

impl fmt::Debug for PartialDft {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartialDft")
            .field("m", &self.m)
            .field("k", &self.k)
            .field("mode", &self.mode)
            .finish()
    }
}

impl PartialEq for PartialDft {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m && self.k == other.k && self.mode == other.mode
    }
}

impl PartialDft {
    pub fn new(m: usize, k: usize, mode: DftMode) -> Result<Self> {
        if k == 0 || m == 0 {
            return Err(Error::Shape(format!("partial DFT needs m, K >= 1 (m={m}, K={k})")));
        }
        if k > m {
            return Err(Error::Shape(format!("partial DFT needs K <= m (m={m}, K={k})")));
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(m);
        let inverse = planner.plan_fft_inverse(m);
        let mut dft = PartialDft {
            m,
            k,
            mode,
            scale: 1.0 / (m as f64).sqrt(),
            forward,
            inverse,
            dense: None,
        };
        if mode == DftMode::Dense {
            dft.dense = Some(dft.to_dense());
        }
        Ok(dft)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> DftMode {
        self.mode
    }

    /// Entry `(j, l)` of `B`, i.e. `exp(-2πi·jl/m)/√m`.
    pub fn entry(&self, j: usize, l: usize) -> C64 {
        // Reduce jl mod m first so the angle stays in [0, 2π).
        let r = ((j as u128 * l as u128) % self.m as u128) as f64;
        C64::from_polar(self.scale, -2.0 * PI * r / self.m as f64)
    }

    /// Row `j` of `B` as a vector, i.e. `conj(b_j)`.
    pub fn row(&self, j: usize) -> CVector {
        CVector::from_fn(self.k, |l, _| self.entry(j, l))
    }

    pub fn to_dense(&self) -> CMatrix {
        CMatrix::from_fn(self.m, self.k, |j, l| self.entry(j, l))
    }

    /// `B v` for `v ∈ C^K`.
    pub fn apply(&self, v: &CVector) -> Result<CVector> {
        if v.len() != self.k {
            return Err(Error::Shape(format!("B·v expects length {}, got {}", self.k, v.len())));
        }
        if let Some(d) = &self.dense {
            return Ok(d * v);
        }
        let mut buf = vec![C64::new(0.0, 0.0); self.m];
        buf[..self.k].copy_from_slice(v.as_slice());
        self.forward.process(&mut buf);
        Ok(CVector::from_iterator(self.m, buf.into_iter().map(|c| c * self.scale)))
    }

    /// `B^H w` for `w ∈ C^m`.
    pub fn apply_adjoint(&self, w: &CVector) -> Result<CVector> {
        if w.len() != self.m {
            return Err(Error::Shape(format!("B^H·w expects length {}, got {}", self.m, w.len())));
        }
        if let Some(d) = &self.dense {
            return Ok(d.ad_mul(w));
        }
        let mut buf = w.as_slice().to_vec();
        self.inverse.process(&mut buf);
        Ok(CVector::from_iterator(self.k, buf[..self.k].iter().map(|c| c * self.scale)))
    }

    /// `B Z` for `Z` with `K` rows, column by column.
    pub fn apply_mat(&self, z: &CMatrix) -> Result<CMatrix> {
        if z.nrows() != self.k {
            return Err(Error::Shape(format!("B·Z expects {} rows, got {}", self.k, z.nrows())));
        }
        if let Some(d) = &self.dense {
            return Ok(d * z);
        }
        let mut out = CMatrix::zeros(self.m, z.ncols());
        let mut buf = vec![C64::new(0.0, 0.0); self.m];
        for c in 0..z.ncols() {
            buf.iter_mut().for_each(|b| *b = C64::new(0.0, 0.0));
            for (dst, src) in buf.iter_mut().zip(z.column(c).iter()) {
                *dst = *src;
            }
            self.forward.process(&mut buf);
            for (dst, src) in out.column_mut(c).iter_mut().zip(buf.iter()) {
                *dst = src * self.scale;
            }
        }
        Ok(out)
    }

    /// `B^H W` for `W` with `m` rows, column by column.
    pub fn apply_adjoint_mat(&self, w: &CMatrix) -> Result<CMatrix> {
        if w.nrows() != self.m {
            return Err(Error::Shape(format!("B^H·W expects {} rows, got {}", self.m, w.nrows())));
        }
        if let Some(d) = &self.dense {
            return Ok(d.ad_mul(w));
        }
        let mut out = CMatrix::zeros(self.k, w.ncols());
        let mut buf = vec![C64::new(0.0, 0.0); self.m];
        for c in 0..w.ncols() {
            for (dst, src) in buf.iter_mut().zip(w.column(c).iter()) {
                *dst = *src;
            }
            self.inverse.process(&mut buf);
            for (dst, src) in out.column_mut(c).iter_mut().zip(buf.iter()) {
                *dst = src * self.scale;
            }
        }
        Ok(out)
    }
}

fn check_designs(a: &CMatrix, b: &PartialDft) -> Result<()> {
    if a.nrows() != b.m() || a.ncols() != b.k() {
        return Err(Error::Shape(format!(
            "A is {}x{} but B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.m(),
            b.k()
        )));
    }
    Ok(())
}

/// `A(Z) = {b_j^H Z a_j}_j`.
pub fn apply_a(z: &CMatrix, a: &CMatrix, b: &PartialDft) -> Result<CVector> {
    check_designs(a, b)?;
    let k = b.k();
    if z.nrows() != k || z.ncols() != k {
        return Err(Error::Shape(format!("Z must be {k}x{k}, got {}x{}", z.nrows(), z.ncols())));
    }
    let bz = b.apply_mat(z)?;
    let m = b.m();
    let mut out = CVector::zeros(m);
    for l in 0..k {
        let bz_col = bz.column(l);
        let a_col = a.column(l);
        for j in 0..m {
            out[j] += bz_col[j] * a_col[j].conj();
        }
    }
    Ok(out)
}

/// `A*(w) = Σ_j w_j b_j a_j^H`.
pub fn apply_a_adjoint(w: &CVector, a: &CMatrix, b: &PartialDft) -> Result<CMatrix> {
    check_designs(a, b)?;
    if w.len() != b.m() {
        return Err(Error::Shape(format!("w must have length {}, got {}", b.m(), w.len())));
    }
    let mut weighted = a.clone();
    for mut col in weighted.column_iter_mut() {
        for (c, wj) in col.iter_mut().zip(w.iter()) {
            *c *= wj;
        }
    }
    b.apply_adjoint_mat(&weighted)
}

/// `T(Z) = A*(A(Z))`.
pub fn apply_t(z: &CMatrix, a: &CMatrix, b: &PartialDft) -> Result<CMatrix> {
    let w = apply_a(z, a, b)?;
    apply_a_adjoint(&w, a, b)
}

/// `A(h x^H)`, i.e. `(B h) ⊙ conj(A x)`, without forming the outer product.
pub fn apply_a_rank1(h: &CVector, x: &CVector, a: &CMatrix, b: &PartialDft) -> Result<CVector> {
    check_designs(a, b)?;
    if x.len() != b.k() {
        return Err(Error::Shape(format!("x must have length {}, got {}", b.k(), x.len())));
    }
    let bh = b.apply(h)?;
    let ax = a * x;
    Ok(bh.zip_map(&ax, |p, q| p * q.conj()))
}

/// `A*(w) x = B^H (w ⊙ A x)`.
pub fn adjoint_apply_right(w: &CVector, x: &CVector, a: &CMatrix, b: &PartialDft) -> Result<CVector> {
    check_designs(a, b)?;
    if w.len() != b.m() || x.len() != b.k() {
        return Err(Error::Shape("A*(w)·x: dimension mismatch".into()));
    }
    let ax = a * x;
    b.apply_adjoint(&w.component_mul(&ax))
}

/// `A*(w)^H h = A^H (conj(w) ⊙ B h)`.
pub fn adjoint_h_apply_left(w: &CVector, h: &CVector, a: &CMatrix, b: &PartialDft) -> Result<CVector> {
    check_designs(a, b)?;
    if w.len() != b.m() || h.len() != b.k() {
        return Err(Error::Shape("A*(w)^H·h: dimension mismatch".into()));
    }
    let bh = b.apply(h)?;
    let v = w.zip_map(&bh, |wj, p| wj.conj() * p);
    Ok(a.ad_mul(&v))
}

/// Thin SVD `M = U diag(S) V^H` with `S` sorted non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub v: CMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> CMatrix {
        let mut us = self.u.clone();
        for (c, s) in self.s.iter().enumerate() {
            us.column_mut(c).scale_mut(*s);
        }
        us * self.v.adjoint()
    }
}

pub fn svd(mtx: &CMatrix) -> Result<Svd> {
    if mtx.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    let dec = mtx
        .clone()
        .try_svd(true, true, f64::EPSILON, SVD_MAX_ITERS)
        .ok_or(Error::SvdNoConvergence { iterations: SVD_MAX_ITERS })?;
    let u = dec.u.expect("u requested");
    let v = dec.v_t.expect("v_t requested").adjoint();
    let s = dec.singular_values;

    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let u = CMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v = CMatrix::from_fn(v.nrows(), order.len(), |r, c| v[(r, order[c])]);
    let s = order.iter().map(|&i| s[i].max(0.0)).collect();
    Ok(Svd { u, s, v })
}

/// Leading singular value with its unit singular vectors.
#[derive(Clone, Debug)]
pub struct SingularTriple {
    pub sigma: f64,
    pub u: CVector,
    pub v: CVector,
    /// Power iterations used; `None` when the full-SVD fallback produced the triple.
    pub power_iters: Option<usize>,
}

/// Rotates `(u, v)` by a common phase so the largest-magnitude entry of `u` is real positive.
pub fn fix_phase(u: &mut CVector, v: &mut CVector) {
    let mut best = 0;
    let mut best_abs = -1.0;
    for (i, c) in u.iter().enumerate() {
        let a = c.norm();
        if a > best_abs {
            best_abs = a;
            best = i;
        }
    }
    if best_abs <= 0.0 {
        return;
    }
    let phase = (u[best] / best_abs).conj();
    u.scale_mut_complex(phase);
    v.scale_mut_complex(phase);
    u[best] = C64::new(u[best].re, 0.0);
}

trait ScaleComplex {
    fn scale_mut_complex(&mut self, c: C64);
}

impl ScaleComplex for CVector {
    fn scale_mut_complex(&mut self, c: C64) {
        self.iter_mut().for_each(|e| *e *= c);
    }
}

/// Power iteration on `M^H M` for the leading singular triple, falling back to
/// a full SVD if the residual `‖M^H u − σ v‖ ≤ tol·σ` is not reached.
pub fn top_singular_triple(mtx: &CMatrix, tol: f64, max_iter: usize) -> Result<SingularTriple> {
    if mtx.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::NonFinite("top_singular_triple input"));
    }
    // Start from the (conjugated) row of largest norm.
    let (best_row, best_norm) = (0..mtx.nrows())
        .map(|r| (r, mtx.row(r).norm()))
        .fold((0, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
    if best_norm == 0.0 {
        return Err(Error::Degenerate("top singular triple of the zero matrix".into()));
    }
    let mut v: CVector = mtx.row(best_row).adjoint() / C64::from(best_norm);

    for iter in 1..=max_iter {
        let w = mtx * &v;
        let sigma = w.norm();
        if sigma == 0.0 {
            break;
        }
        let u = w / C64::from(sigma);
        let z = mtx.ad_mul(&u);
        let resid = (&z - &v * C64::from(sigma)).norm();
        if resid <= tol * sigma {
            let (mut u, mut v) = (u, v);
            fix_phase(&mut u, &mut v);
            return Ok(SingularTriple { sigma, u, v, power_iters: Some(iter) });
        }
        let zn = z.norm();
        v = z / C64::from(zn);
    }

    let full = svd(mtx)?;
    let mut u = full.u.column(0).into_owned();
    let mut v = full.v.column(0).into_owned();
    fix_phase(&mut u, &mut v);
    Ok(SingularTriple { sigma: full.s[0], u, v, power_iters: None })
}

/// Frobenius inner product `⟨X, Y⟩ = tr(X^H Y)`.
pub fn inner(x: &CMatrix, y: &CMatrix) -> C64 {
    x.iter().zip(y.iter()).map(|(p, q)| p.conj() * q).sum()
}

pub fn is_finite(v: &CVector) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}
