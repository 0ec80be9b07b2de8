#![allow(dead_code)]

use bdeconv::linops::{CVector, C64};
use bdeconv::model::{generate_instance, ProblemInstance, SignalMode};
use bdeconv::ncvx::{self, Iterate};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_cvec(rng: &mut ChaCha8Rng, n: usize) -> CVector {
    CVector::from_fn(n, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im)
    })
}

/// Central-difference Wirtinger gradient `(∂f/∂Re + i ∂f/∂Im) / 2`.
pub fn fd_wirtinger<F: Fn(&CVector) -> f64>(f: F, z: &CVector, delta: f64) -> CVector {
    let mut g = CVector::zeros(z.len());
    let mut w = z.clone();
    for i in 0..z.len() {
        let orig = w[i];
        w[i] = orig + C64::new(delta, 0.0);
        let fp = f(&w);
        w[i] = orig - C64::new(delta, 0.0);
        let fm = f(&w);
        let d_re = (fp - fm) / (2.0 * delta);
        w[i] = orig + C64::new(0.0, delta);
        let fp = f(&w);
        w[i] = orig - C64::new(0.0, delta);
        let fm = f(&w);
        let d_im = (fp - fm) / (2.0 * delta);
        w[i] = orig;
        g[i] = C64::new(d_re, d_im) / 2.0;
    }
    g
}

pub const FD_DELTA: f64 = 1e-5;

/// Worst relative discrepancy between the analytic gradients and finite
/// differences, over `points` random iterates on each `(K, m)` shape.
pub fn gradient_fd_discrepancy(shapes: &[(usize, usize)], points: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for (si, &(k, m)) in shapes.iter().enumerate() {
        let inst = generate_instance(k, m, 0.05, seed + si as u64, SignalMode::UnitGaussian).unwrap();
        let lambda = 0.3;
        let mut r = rng(seed ^ (1000 + si as u64));
        for _ in 0..points {
            let h = rand_cvec(&mut r, k) * C64::from(0.5);
            let x = rand_cvec(&mut r, k) * C64::from(0.5);
            let g = ncvx::wirtinger_grad(&Iterate::new(h.clone(), x.clone()), &inst, lambda).unwrap();
            let fh = |hh: &CVector| ncvx::objective(&Iterate::new(hh.clone(), x.clone()), &inst, lambda).unwrap();
            let fx = |xx: &CVector| ncvx::objective(&Iterate::new(h.clone(), xx.clone()), &inst, lambda).unwrap();
            let gh = fd_wirtinger(fh, &h, FD_DELTA);
            let gx = fd_wirtinger(fx, &x, FD_DELTA);
            worst = worst.max((&gh - &g.h).norm() / g.h.norm());
            worst = worst.max((&gx - &g.x).norm() / g.x.norm());
        }
    }
    worst
}

pub const FD_SHAPES: [(usize, usize); 3] = [(1, 4), (3, 20), (6, 48)];

pub fn noiseless(k: usize, m: usize, seed: u64) -> ProblemInstance {
    generate_instance(k, m, 0.0, seed, SignalMode::UnitGaussian).unwrap()
}

/// Least-squares slope of `y` against `x`.
pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}
