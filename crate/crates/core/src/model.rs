//! Problem instances for the bilinear measurement model
//! `y_j = b_j^H h* x*^H a_j + ξ_j`, their diagnostics, and a binary file format.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linops::{self, CMatrix, CVector, DftMode, PartialDft, C64};

const MAGIC: &[u8; 8] = b"BDCINST\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 8 + 8 + 1;

/// How the ground-truth signals are chosen.
#[derive(Clone, Debug)]
pub enum SignalMode {
    /// Entries i.i.d. `N(0, 1/2K) + i N(0, 1/2K)`, so both norms are close to one.
    UnitGaussian,
    Provided { h: CVector, x: CVector },
}

#[derive(Clone, Debug)]
pub struct ProblemInstance {
    pub k: usize,
    pub m: usize,
    /// `m × K`, row `j` is `a_j^H`.
    pub a: CMatrix,
    pub b: PartialDft,
    pub h_star: CVector,
    pub x_star: CVector,
    pub xi: CVector,
    pub y: CVector,
    pub sigma: f64,
    pub seed: u64,
}

impl PartialEq for ProblemInstance {
    fn eq(&self, o: &Self) -> bool {
        self.k == o.k
            && self.m == o.m
            && self.b == o.b
            && self.sigma.to_bits() == o.sigma.to_bits()
            && self.seed == o.seed
            && bits_eq(self.a.as_slice(), o.a.as_slice())
            && bits_eq(self.h_star.as_slice(), o.h_star.as_slice())
            && bits_eq(self.x_star.as_slice(), o.x_star.as_slice())
            && bits_eq(self.xi.as_slice(), o.xi.as_slice())
            && bits_eq(self.y.as_slice(), o.y.as_slice())
    }
}

fn bits_eq(p: &[C64], q: &[C64]) -> bool {
    p.len() == q.len()
        && p.iter()
            .zip(q)
            .all(|(a, b)| a.re.to_bits() == b.re.to_bits() && a.im.to_bits() == b.im.to_bits())
}

/// Derives an independent 64-bit seed from a base seed and a list of indices.
///
/// SplitMix64 finalizer applied after folding in each index, so changing any
/// index decorrelates the result and existing (base, indices) tuples are stable.
pub fn derive_seed(base: u64, indices: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    indices.iter().fold(mix(base), |acc, &i| mix(acc ^ mix(i)))
}

fn complex_gaussian(rng: &mut ChaCha20Rng, std_per_part: f64) -> C64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * std_per_part, im * std_per_part)
}

pub fn generate_instance(k: usize, m: usize, sigma: f64, seed: u64, signal: SignalMode) -> Result<ProblemInstance> {
    if k == 0 {
        return Err(Error::Shape("K must be at least 1".into()));
    }
    if m < k {
        return Err(Error::Shape(format!("need m >= K, got m={m}, K={k}")));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let half = 0.5f64.sqrt();

    // Row-major draw order so the stream layout does not depend on storage order.
    let mut a = CMatrix::zeros(m, k);
    for j in 0..m {
        for l in 0..k {
            a[(j, l)] = complex_gaussian(&mut rng, half);
        }
    }

    let (h_star, x_star) = match signal {
        SignalMode::UnitGaussian => {
            let s = (1.0 / (2.0 * k as f64)).sqrt();
            let h = CVector::from_fn(k, |_, _| complex_gaussian(&mut rng, s));
            let x = CVector::from_fn(k, |_, _| complex_gaussian(&mut rng, s));
            (h, x)
        }
        SignalMode::Provided { h, x } => {
            if h.len() != k || x.len() != k {
                return Err(Error::Shape(format!("provided signals must have length {k}")));
            }
            if !linops::is_finite(&h) || !linops::is_finite(&x) {
                return Err(Error::NonFinite("provided signals"));
            }
            (h, x)
        }
    };

    let xi = if sigma == 0.0 {
        CVector::zeros(m)
    } else {
        let s = sigma * half;
        CVector::from_fn(m, |_, _| complex_gaussian(&mut rng, s))
    };

    let b = PartialDft::new(m, k, DftMode::Fast)?;
    let y = linops::apply_a_rank1(&h_star, &x_star, &a, &b)? + &xi;
    Ok(ProblemInstance { k, m, a, b, h_star, x_star, xi, y, sigma, seed })
}

impl ProblemInstance {
    /// Same instance with `B` switched to the requested evaluation mode.
    pub fn with_dft_mode(mut self, mode: DftMode) -> Result<Self> {
        self.b = PartialDft::new(self.m, self.k, mode)?;
        Ok(self)
    }

    /// Noiseless measurements `A(h x^H)`.
    pub fn measure(&self, h: &CVector, x: &CVector) -> Result<CVector> {
        linops::apply_a_rank1(h, x, &self.a, &self.b)
    }

    /// Recomputes `y` from the stored designs, truth and noise.
    pub fn reconstruct_y(&self) -> Result<CVector> {
        Ok(self.measure(&self.h_star, &self.x_star)? + &self.xi)
    }

    /// `h* x*^H`.
    pub fn truth_matrix(&self) -> CMatrix {
        &self.h_star * self.x_star.adjoint()
    }

    /// `σ √(K log m)` with the natural logarithm.
    pub fn noise_scale(&self) -> f64 {
        self.sigma * (self.k as f64 * (self.m as f64).ln()).sqrt()
    }

    pub fn diagnostics(&self) -> Result<ModelDiagnostics> {
        Ok(ModelDiagnostics {
            mu: incoherence(&self.h_star, &self.b)?,
            snr: snr(self),
            h_norm: self.h_star.norm(),
            x_norm: self.x_star.norm(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDiagnostics {
    pub mu: f64,
    pub snr: f64,
    pub h_norm: f64,
    pub x_norm: f64,
}

/// `√m · max_j |b_j^H h| / ‖h‖₂`.
pub fn incoherence(h: &CVector, b: &PartialDft) -> Result<f64> {
    let norm = h.norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("incoherence of the zero vector".into()));
    }
    let bh = b.apply(h)?;
    let peak = bh.iter().map(|c| c.norm()).fold(0.0, f64::max);
    Ok((b.m() as f64).sqrt() * peak / norm)
}

/// Sample-wise SNR `‖h*‖²‖x*‖² / (m σ²)`; `f64::INFINITY` when `σ = 0`.
pub fn snr(inst: &ProblemInstance) -> f64 {
    if inst.sigma == 0.0 {
        return f64::INFINITY;
    }
    inst.h_star.norm_squared() * inst.x_star.norm_squared() / (inst.m as f64 * inst.sigma * inst.sigma)
}

fn put_complex(buf: &mut Vec<u8>, v: &[C64]) {
    for c in v {
        buf.extend_from_slice(&c.re.to_le_bytes());
        buf.extend_from_slice(&c.im.to_le_bytes());
    }
}

/// Canonical byte encoding of an instance.
///
/// Layout (little-endian): magic `BDCINST\0`, `u32` version, `u64` K, `u64` m,
/// `f64` σ, `u64` seed, `u8` DFT mode (0 fast, 1 dense), then interleaved
/// `(re, im)` `f64` pairs for `A` (row-major), `h*`, `x*`, `ξ`, `y`.
pub fn encode_instance(inst: &ProblemInstance) -> Vec<u8> {
    let (k, m) = (inst.k, inst.m);
    let mut buf = Vec::with_capacity(HEADER_LEN + 16 * (m * k + 2 * k + 2 * m));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    buf.extend_from_slice(&(m as u64).to_le_bytes());
    buf.extend_from_slice(&inst.sigma.to_le_bytes());
    buf.extend_from_slice(&inst.seed.to_le_bytes());
    buf.push(match inst.b.mode() {
        DftMode::Fast => 0,
        DftMode::Dense => 1,
    });
    let rows: Vec<C64> = (0..m).flat_map(|j| (0..k).map(move |l| (j, l))).map(|(j, l)| inst.a[(j, l)]).collect();
    put_complex(&mut buf, &rows);
    put_complex(&mut buf, inst.h_star.as_slice());
    put_complex(&mut buf, inst.x_star.as_slice());
    put_complex(&mut buf, inst.xi.as_slice());
    put_complex(&mut buf, inst.y.as_slice());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn complex(&mut self, n: usize) -> Result<Vec<C64>> {
        (0..n).map(|_| Ok(C64::new(self.f64()?, self.f64()?))).collect()
    }
}

pub fn decode_instance(bytes: &[u8]) -> Result<ProblemInstance> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Malformed("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let k = r.u64()? as usize;
    let m = r.u64()? as usize;
    let sigma = r.f64()?;
    let seed = r.u64()?;
    let mode = match r.take(1)?[0] {
        0 => DftMode::Fast,
        1 => DftMode::Dense,
        other => return Err(Error::Malformed(format!("unknown DFT mode tag {other}"))),
    };
    if k == 0 || m < k {
        return Err(Error::Malformed(format!("invalid dimensions K={k}, m={m}")));
    }
    let expected = m
        .checked_mul(k)
        .and_then(|mk| mk.checked_add(2 * k + 2 * m))
        .and_then(|n| n.checked_mul(16))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Malformed("dimension overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Malformed(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let a_rows = r.complex(m * k)?;
    let a = CMatrix::from_row_slice(m, k, &a_rows);
    let h_star = CVector::from_vec(r.complex(k)?);
    let x_star = CVector::from_vec(r.complex(k)?);
    let xi = CVector::from_vec(r.complex(m)?);
    let y = CVector::from_vec(r.complex(m)?);
    let b = PartialDft::new(m, k, mode)?;
    Ok(ProblemInstance { k, m, a, b, h_star, x_star, xi, y, sigma, seed })
}

pub fn save_instance(inst: &ProblemInstance, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_instance(inst))?;
    f.sync_all()?;
    Ok(())
}

pub fn load_instance(path: &Path) -> Result<ProblemInstance> {
    decode_instance(&fs::read(path)?)
}
