use std::sync::Arc;

use barywin::congruent::{
    derive_alpha, grad_left, grad_right, left_matrix, random_column_stochastic, CongruentSystem, ConjugateSolverConfig,
    LogSumExp, Quadratic, SmoothConvexFunction,
};
use barywin::gaussian_ref::{bures_w2_sq, gaussian_barycenter, fixed_point_residual, GaussianMeasure};
use barywin::linalg::{random_rotation, SpdMatrix};
use barywin::nn::Mlp;
use barywin::rng;
use nalgebra::{DMatrix, DVector};
use ndarray::{concatenate, Array2, Axis};
use proptest::prelude::*;
use rand::Rng;

fn random_spd(dim: usize, seed: u64) -> SpdMatrix {
    let mut r = rng::seeded(seed);
    let q = random_rotation(dim, &mut r).unwrap();
    let eig = DVector::from_fn(dim, |_, _| 0.2 + 3.0 * r.random::<f64>());
    let m = &q.transpose() * DMatrix::from_diagonal(&eig) * &q;
    SpdMatrix::new((&m + m.transpose()) * 0.5).unwrap()
}

fn random_gaussian(dim: usize, seed: u64) -> GaussianMeasure {
    let mut r = rng::seeded(seed ^ 0xabcd);
    let mean = DVector::from_fn(dim, |_, _| r.random::<f64>() * 2.0 - 1.0);
    GaussianMeasure::new(mean, random_spd(dim, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_row_independent(seed in 0u64..1000, a in 1usize..6, b in 1usize..6) {
        let net = Mlp::he_init(&[3, 7, 5, 2], seed).unwrap();
        let mut r = rng::seeded(seed + 1);
        let x1 = Array2::from_shape_fn((a, 3), |_| r.random::<f64>());
        let x2 = Array2::from_shape_fn((b, 3), |_| r.random::<f64>());
        let joint = net.forward(&concatenate(Axis(0), &[x1.view(), x2.view()]).unwrap().view()).unwrap();
        let split = concatenate(Axis(0), &[net.forward(&x1.view()).unwrap().view(), net.forward(&x2.view()).unwrap().view()]).unwrap();
        prop_assert!((joint - split).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn checkpoint_roundtrip(seed in 0u64..1000, w in 1usize..20) {
        let net = Mlp::he_init(&[2, w, w, 3], seed).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        prop_assert_eq!(Mlp::read_checkpoint(&buf[..]).unwrap(), net);
    }

    #[test]
    fn bures_is_a_squared_metric(seed in 0u64..1000, dim in 1usize..6) {
        let p = random_gaussian(dim, seed);
        let q = random_gaussian(dim, seed + 500);
        let pq = bures_w2_sq(&p, &q).unwrap();
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - bures_w2_sq(&q, &p).unwrap()).abs() < 1e-9 * (1.0 + pq));
        prop_assert!(bures_w2_sq(&p, &p).unwrap() < 1e-12);
    }

    #[test]
    fn barycenter_is_a_fixed_point_and_permutation_invariant(seed in 0u64..1000, dim in 1usize..6, n in 2usize..5) {
        let covs: Vec<_> = (0..n).map(|k| random_spd(dim, seed * 10 + k as u64)).collect();
        let mut r = rng::seeded(seed);
        let raw: Vec<f64> = (0..n).map(|_| 0.1 + r.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let fix = 1.0 - w[1..].iter().sum::<f64>();
        w[0] = fix;
        let s = gaussian_barycenter(&covs, &w).unwrap();
        prop_assert!(fixed_point_residual(&s, &covs, &w).unwrap() < 1e-10);
        let rc: Vec<_> = covs.iter().rev().cloned().collect();
        let rw: Vec<f64> = w.iter().rev().copied().collect();
        let s2 = gaussian_barycenter(&rc, &rw).unwrap();
        prop_assert!((s.as_matrix() - s2.as_matrix()).norm() < 1e-9 * (1.0 + s.as_matrix().norm()));
    }

    #[test]
    fn alpha_weights_sum_to_one(seed in 0u64..10_000, n in 1usize..6, m in 1usize..5) {
        let mut r = rng::seeded(seed);
        let raw: Vec<f64> = (0..m).map(|_| 0.05 + r.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let betas: Vec<f64> = (0..m).map(|_| 0.05 + 0.9 * r.random::<f64>()).collect();
        let gl = random_column_stochastic(n, m, &mut r);
        let gr = random_column_stochastic(n, m, &mut r);
        let alpha = derive_alpha(&w, &betas, &gl, &gr);
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_left_gradient_inverts_the_primal(seed in 0u64..1000, dim in 1usize..5, beta in 0.05f64..0.95) {
        let psi = Quadratic::random(dim, 0.2, 5.0, &mut rng::seeded(seed)).unwrap();
        let a = psi.matrix();
        let l = left_matrix(a, beta).unwrap();
        let primal = DMatrix::identity(dim, dim) * beta + a * (1.0 - beta);
        prop_assert!((&primal * &l - DMatrix::identity(dim, dim)).norm() < 1e-10);
    }

    #[test]
    fn log_sum_exp_systems_are_congruent(seed in 0u64..1000, beta in 0.1f64..0.9) {
        let mut r = rng::seeded(seed);
        let psi = LogSumExp::random_default(3, &mut r).unwrap();
        let x = DVector::from_fn(3, |_, _| 4.0 * r.random::<f64>() - 2.0);
        let cfg = ConjugateSolverConfig::default();
        let yl = grad_left(&psi, beta, &x, &cfg).unwrap();
        let yr = grad_right(&psi, beta, &x, &cfg).unwrap();
        prop_assert!((yl * beta + yr * (1.0 - beta) - &x).norm() < 1e-7);
    }

    #[test]
    fn strong_convexity_and_smoothness_bounds(seed in 0u64..1000) {
        let mut r = rng::seeded(seed);
        let psi = LogSumExp::random_default(3, &mut r).unwrap();
        let x = DVector::from_fn(3, |_, _| 4.0 * r.random::<f64>() - 2.0);
        let y = DVector::from_fn(3, |_, _| 4.0 * r.random::<f64>() - 2.0);
        let d = &x - &y;
        let inner = (psi.grad(&x) - psi.grad(&y)).dot(&d);
        let sq = d.norm_squared();
        prop_assert!(psi.strong_convexity() * sq <= inner + 1e-12);
        prop_assert!(inner <= psi.smoothness() * sq + 1e-12);
    }

    #[test]
    fn system_gradients_are_monotone(seed in 0u64..200) {
        let mut r = rng::seeded(seed);
        let sys = CongruentSystem::random_log_sum_exp(2, &mut r).unwrap();
        let x = DVector::from_fn(2, |_, _| 4.0 * r.random::<f64>() - 2.0);
        let y = DVector::from_fn(2, |_, _| 4.0 * r.random::<f64>() - 2.0);
        let gx = sys.system_grads(&x).unwrap();
        let gy = sys.system_grads(&y).unwrap();
        for (a, b) in gx.iter().zip(&gy) {
            prop_assert!((a - b).dot(&(&x - &y)) >= -1e-10);
        }
    }

    #[test]
    fn quadratic_system_matches_matrix_oracle(seed in 0u64..500, dim in 1usize..5) {
        let mut r = rng::seeded(seed);
        let p1 = Arc::new(Quadratic::random(dim, 0.3, 3.0, &mut r).unwrap());
        let p2 = Arc::new(Quadratic::random(dim, 0.3, 3.0, &mut r).unwrap());
        let sys = CongruentSystem::chain_configuration(p1.clone(), p2.clone()).unwrap();
        let mats = sys.system_matrices().unwrap();
        // ∇ψ₁ = ∇ψ₁ˡ, ∇ψ₂ = (∇ψ₂ˡ + ∇ψ₁ʳ)/2, ∇ψ₃ = ∇ψ₂ʳ for the chain layout
        let (l1, l2) = (left_matrix(p1.matrix(), 0.5).unwrap(), left_matrix(p2.matrix(), 0.5).unwrap());
        let r1 = p1.matrix() * &l1;
        let r2 = p2.matrix() * &l2;
        prop_assert!((&mats[0] - &l1).norm() < 1e-12);
        prop_assert!((&mats[1] - (&l2 + &r1) * 0.5).norm() < 1e-12);
        prop_assert!((&mats[2] - &r2).norm() < 1e-12);
        let x = DVector::from_fn(dim, |_, _| r.random::<f64>());
        let grads = sys.system_grads(&x).unwrap();
        for (g, b) in grads.iter().zip(&mats) {
            prop_assert!((g - b * &x).norm() < 1e-12);
        }
    }
}
