mod common;

use bdeconv::cvx::{self, ConvexConfig};
use bdeconv::linops::{self, CMatrix, CVector, DftMode, PartialDft, C64};
use bdeconv::metrics;
use bdeconv::model::{self, generate_instance, SignalMode};
use bdeconv::ncvx::{self, balance, Iterate, SolverConfig};
use common::*;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

#[test]
fn fd_calibrates_on_quadratic() {
    // f(z) = |z − c|² has Wirtinger gradient z − c.
    let c = C64::new(3.0, -2.0);
    let z = CVector::from_vec(vec![C64::new(1.0, 0.5)]);
    let g = fd_wirtinger(|w: &CVector| (w[0] - c).norm_sqr(), &z, FD_DELTA);
    assert!((g[0] - (z[0] - c)).norm() < 1e-9);
}

#[test]
fn wirtinger_gradient_matches_finite_differences() {
    let worst = gradient_fd_discrepancy(&FD_SHAPES, 5, 77);
    assert!(worst <= 1e-6, "worst relative discrepancy {worst:e}");
}

#[test]
fn trajectory_is_gauge_equivariant() {
    let inst = generate_instance(10, 120, 1e-3, 31, SignalMode::UnitGaussian).unwrap();
    let cfg = SolverConfig { max_iters: 200, ..SolverConfig::default() };
    let start = ncvx::spectral_init(&inst).unwrap();
    let phase = C64::from_polar(1.0, 1.234);
    let rotated = Iterate::new(&start.h * phase, &start.x * phase);
    let a = ncvx::run_nonconvex_from(&inst, &cfg, start).unwrap();
    let b = ncvx::run_nonconvex_from(&inst, &cfg, rotated).unwrap();
    assert_eq!(a.records.len(), b.records.len());
    for (p, q) in a.records.iter().zip(&b.records) {
        assert!((p.dist - q.dist).abs() <= 1e-10, "{} vs {}", p.dist, q.dist);
        assert!((p.rel_error - q.rel_error).abs() <= 1e-10);
    }
}

#[test]
fn unit_gaussian_signals_have_unit_norm_on_average() {
    let seeds = 100;
    let (mut hs, mut xs) = (0.0, 0.0);
    for s in 0..seeds {
        let inst = generate_instance(20, 200, 0.0, 500 + s, SignalMode::UnitGaussian).unwrap();
        hs += inst.h_star.norm();
        xs += inst.x_star.norm();
    }
    let (hm, xm) = (hs / seeds as f64, xs / seeds as f64);
    assert!((0.9..=1.1).contains(&hm), "{hm}");
    assert!((0.9..=1.1).contains(&xm), "{xm}");
}

#[test]
fn sensing_matrix_has_unit_second_moment() {
    let inst = generate_instance(20, 400, 0.0, 3, SignalMode::UnitGaussian).unwrap();
    let n = (inst.m * inst.k) as f64;
    let second = inst.a.iter().map(|c| c.norm_sqr()).sum::<f64>() / n;
    assert!((second - 1.0).abs() <= 0.05, "{second}");
    let re = inst.a.iter().map(|c| c.re * c.re).sum::<f64>() / n;
    assert!((re - 0.5).abs() <= 0.05 * 0.5, "{re}");
    let mean = inst.a.iter().sum::<C64>() / C64::from(n);
    assert!(mean.norm() < 0.05);
}

#[test]
fn random_signals_are_incoherent() {
    let m = 400;
    let bound = 4.0 * (m as f64).ln().sqrt();
    for s in 0..50 {
        let inst = generate_instance(20, m, 0.0, 900 + s, SignalMode::UnitGaussian).unwrap();
        let mu = inst.diagnostics().unwrap().mu;
        assert!(mu <= bound, "seed {s}: mu {mu} > {bound}");
        assert!(mu >= 1.0 - 1e-12);
    }
}

#[test]
fn noise_has_requested_scale() {
    let sigma = 0.01;
    let inst = generate_instance(10, 4000, sigma, 8, SignalMode::UnitGaussian).unwrap();
    let var = inst.xi.iter().map(|c| c.norm_sqr()).sum::<f64>() / inst.m as f64;
    assert!((var / (sigma * sigma) - 1.0).abs() < 0.1, "{var}");
    let clean = generate_instance(10, 100, 0.0, 8, SignalMode::UnitGaussian).unwrap();
    assert!(clean.xi.iter().all(|c| c.re == 0.0 && c.im == 0.0));
}

#[test]
fn save_load_round_trip_preserves_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("inst.bdi");
    let inst = generate_instance(7, 50, 1e-3, 123, SignalMode::UnitGaussian).unwrap();
    model::save_instance(&inst, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = model::load_instance(&path).unwrap();
    assert_eq!(loaded, inst);

    let path2 = dir.path().join("again.bdi");
    model::save_instance(&loaded, &path2).unwrap();
    let h1 = Sha256::digest(&bytes);
    let h2 = Sha256::digest(std::fs::read(&path2).unwrap());
    assert_eq!(h1, h2);

    let regenerated = generate_instance(7, 50, 1e-3, 123, SignalMode::UnitGaussian).unwrap();
    assert_eq!(Sha256::digest(model::encode_instance(&regenerated)), h1);

    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(model::load_instance(&path).is_err());
}

#[test]
fn noiseless_recovery_nonconvex() {
    let inst = noiseless(10, 200, 41);
    let cfg = SolverConfig { lambda_scale: None, lambda: 0.0, max_iters: 2000, ..SolverConfig::default() };
    let traj = ncvx::run_nonconvex(&inst, &cfg).unwrap();
    assert!(traj.last().rel_error <= 1e-6, "{}", traj.last().rel_error);
    assert!(traj.last().dist <= 1e-5);
}

#[test]
fn noiseless_recovery_convex() {
    let inst = noiseless(6, 120, 42);
    let cfg = ConvexConfig { lambda_scale: None, lambda: 0.0, ..ConvexConfig::default() };
    let res = cvx::run_convex(&inst, &cfg).unwrap();
    let truth = inst.truth_matrix();
    let err = (&res.z_rank1 - &truth).norm() / truth.norm();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn solvers_agree_on_noisy_instance() {
    let inst = generate_instance(8, 160, 1e-3, 43, SignalMode::UnitGaussian).unwrap();
    let traj = ncvx::run_nonconvex(&inst, &SolverConfig::default()).unwrap();
    let res = cvx::run_convex(&inst, &ConvexConfig::default()).unwrap();
    let truth = inst.truth_matrix();
    let zn = &traj.final_iterate.h * traj.final_iterate.x.adjoint();
    let en = (&zn - &truth).norm() / truth.norm();
    let ec = (&res.z_cvx - &truth).norm() / truth.norm();
    let gap = (&res.z_cvx - &zn).norm() / truth.norm();
    assert!(en / ec <= 2.0 && ec / en <= 2.0, "ncvx {en:e} cvx {ec:e}");
    assert!(gap <= 3.0 * en.min(ec), "gap {gap:e}");
}

fn cvec(k: usize) -> impl Strategy<Value = CVector> {
    prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), k)
        .prop_map(|v| CVector::from_iterator(v.len(), v.into_iter().map(|(a, b)| C64::new(a, b))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn prop_balance_equalizes_and_preserves_product(
        h in cvec(5), x in cvec(5), s in -4.0f64..4.0
    ) {
        prop_assume!(h.norm() > 1e-3 && x.norm() > 1e-3);
        let h = h * C64::from(10f64.powf(s));
        let before = &h * x.adjoint();
        let b = balance(h, x, 0).unwrap();
        prop_assert!((b.h.norm() - b.x.norm()).abs() <= 1e-12 * b.h.norm());
        prop_assert!((&b.h * b.x.adjoint() - &before).norm() <= 1e-12 * before.norm());
    }

    #[test]
    fn prop_adjoint_identity(seed in 0u64..10_000, k in 1usize..6, extra in 0usize..20) {
        let m = k + extra;
        let inst = generate_instance(k, m, 0.0, seed, SignalMode::UnitGaussian).unwrap();
        let mut r = rng(seed);
        let z = CMatrix::from_fn(k, k, |_, _| rand_cvec(&mut r, 1)[0]);
        let w = rand_cvec(&mut r, m);
        for mode in [DftMode::Fast, DftMode::Dense] {
            let b = PartialDft::new(m, k, mode).unwrap();
            let az = linops::apply_a(&z, &inst.a, &b).unwrap();
            let aw = linops::apply_a_adjoint(&w, &inst.a, &b).unwrap();
            let lhs = az.dotc(&w);
            let rhs = linops::inner(&z, &aw);
            prop_assert!((lhs - rhs).norm() <= 1e-10 * (1.0 + z.norm() * w.norm()));
        }
    }

    #[test]
    fn prop_alignment_is_gauge_invariant_and_optimal(
        h in cvec(4), x in cvec(4), hs in cvec(4), xs in cvec(4),
        mag in -1.0f64..1.0, ang in 0.0f64..std::f64::consts::TAU
    ) {
        prop_assume!(h.norm() > 1e-2 && x.norm() > 1e-2 && hs.norm() > 1e-2 && xs.norm() > 1e-2);
        let al = metrics::align(&h, &x, &hs, &xs).unwrap();
        let beta = C64::from_polar(10f64.powf(mag), ang);
        let g = Iterate::new(h.clone(), x.clone()).gauge(beta);
        let al2 = metrics::align(&g.h, &g.x, &hs, &xs).unwrap();
        prop_assert!((al.dist - al2.dist).abs() <= 1e-8 * (1.0 + al.dist));
        let unaligned = metrics::aligned_sq_dist(&h, &x, &hs, &xs, C64::new(1.0, 0.0)).sqrt();
        prop_assert!(al.dist <= unaligned + 1e-12);
        let e1 = metrics::relative_fro_error(&h, &x, &hs, &xs).unwrap();
        let e2 = metrics::relative_fro_error(&g.h, &g.x, &hs, &xs).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-10 * (1.0 + e1));
    }

    #[test]
    fn prop_svt_is_nonexpansive(seed in 0u64..10_000, tau in 0.0f64..3.0) {
        let mut r = rng(seed);
        let p = CMatrix::from_fn(4, 4, |_, _| rand_cvec(&mut r, 1)[0]);
        let q = CMatrix::from_fn(4, 4, |_, _| rand_cvec(&mut r, 1)[0]);
        let d = (cvx::svt(&p, tau).unwrap() - cvx::svt(&q, tau).unwrap()).norm();
        prop_assert!(d <= (&p - &q).norm() * (1.0 + 1e-12));
    }

    #[test]
    fn prop_instances_are_deterministic(seed in 0u64..u64::MAX) {
        let a = generate_instance(3, 11, 0.1, seed, SignalMode::UnitGaussian).unwrap();
        let b = generate_instance(3, 11, 0.1, seed, SignalMode::UnitGaussian).unwrap();
        prop_assert_eq!(model::encode_instance(&a), model::encode_instance(&b));
    }
}
