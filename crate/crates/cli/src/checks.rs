//! Invariant suite behind the `lemma-checks` experiment.

use std::sync::Arc;

use barywin::congruent::{derive_alpha, random_column_stochastic, CongruentSystem, Quadratic, SmoothConvexFunction};
use barywin::gaussian_ref::{fixed_point_residual, gaussian_barycenter, gaussian_barycenter_solve, gaussian_ot_map, location_scatter_members, FixedPointConfig, GaussianMeasure};
use barywin::linalg::SpdMatrix;
use barywin::measures::{base_sampler, batch_moments, make_scatter_population, BaseKind};
use barywin::nn::{layer_sizes, Mlp};
use barywin::rng;
use barywin::win::lemma1_gradient_check;
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::manifest::CheckRecord;

fn normalized(raw: Vec<f64>) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
    w[0] = 1.0 - w[1..].iter().sum::<f64>();
    w
}

/// Fixed point, Gaussian congruence and gradient equivalence per dimension,
/// then the congruent-system identities.
pub fn lemma_suite(cfg: &ExperimentConfig) -> CliResult<Vec<CheckRecord>> {
    let mut out = Vec::new();
    for &d in &cfg.dims {
        let spec = make_scatter_population(d, cfg.weights.len(), cfg.seed)?.with_weights(&cfg.weights)?;
        let covs: Vec<_> = (0..spec.members.len()).map(|n| spec.member_covariance(n)).collect();
        let sol = gaussian_barycenter_solve(&covs, &spec.weights, FixedPointConfig::default())?;
        out.push(CheckRecord::below(format!("fixed_point_residual_d{d}"), sol.residual, 1e-12));
        let recheck = fixed_point_residual(&sol.cov, &covs, &spec.weights)?;
        out.push(CheckRecord::below(format!("fixed_point_recheck_d{d}"), recheck, 1e-12));

        let members = location_scatter_members(&spec)?;
        let bary = GaussianMeasure::new(nalgebra::DVector::zeros(d), sol.cov)?;
        let mut sum = DMatrix::zeros(d, d);
        for (p, &a) in members.iter().zip(&spec.weights) {
            sum += gaussian_ot_map(&bary, p)?.matrix() * a;
        }
        let dev = (sum - DMatrix::identity(d, d)).abs().max();
        out.push(CheckRecord::below(format!("gaussian_congruence_d{d}"), dev, 1e-8));

        let hidden = cfg.win.hidden_for(d);
        let g = Mlp::he_init_with(&layer_sizes(d, &hidden, d), &mut rng::stream(cfg.seed, rng::INIT, 0))?;
        let z = base_sampler(BaseKind::Gaussian, d)?.sample(&mut rng::stream(cfg.seed, rng::LATENT, 0), 256)?;
        let (mean, cov) = batch_moments(&g.forward(&z.view())?.view())?;
        let est = GaussianMeasure::new(mean, cov)?;
        let maps = members.iter().map(|p| gaussian_ot_map(&est, p)).collect::<barywin::Result<Vec<_>>>()?;
        let cmp = lemma1_gradient_check(&g, &maps, &spec.weights, &z.view())?;
        out.push(CheckRecord::below(format!("gradient_equivalence_d{d}"), cmp.relative_difference, 1e-6));
    }

    let mut r = rng::stream(cfg.seed, rng::DATASET, 0);
    let mut max_1d = 0.0_f64;
    for _ in 0..100 {
        let n = r.random_range(2..6);
        let sig: Vec<f64> = (0..n).map(|_| 0.1 + 3.0 * r.random::<f64>()).collect();
        let w = normalized((0..n).map(|_| 0.05 + r.random::<f64>()).collect());
        let covs = sig.iter().map(|s| SpdMatrix::from_diagonal(&[s * s])).collect::<barywin::Result<Vec<_>>>()?;
        let s = gaussian_barycenter(&covs, &w)?;
        let expect: f64 = sig.iter().zip(&w).map(|(s, a)| s * a).sum();
        max_1d = max_1d.max((s.as_matrix()[(0, 0)].sqrt() - expect).abs());
    }
    out.push(CheckRecord::below("one_dimensional_sigma_error", max_1d, 1e-12));

    let points = |d: usize, r: &mut rng::StreamRng| Array2::from_shape_fn((1024, d), |_| 3.0 * (2.0 * r.random::<f64>() - 1.0));
    let quad = CongruentSystem::random_quadratic(3, 0.2, 5.0, &mut r)?;
    let pts = points(3, &mut r);
    out.push(CheckRecord::below("quadratic_congruence", quad.verify_congruence(&pts.view())?, 1e-12));
    let lse = CongruentSystem::random_log_sum_exp(2, &mut r)?.with_solver(cfg.solver)?;
    let pts = points(2, &mut r);
    out.push(CheckRecord::below("log_sum_exp_congruence", lse.verify_congruence(&pts.view())?, 1e-6));

    let mut alpha_err = 0.0_f64;
    for _ in 0..100 {
        let (n, m) = (r.random_range(1..6), r.random_range(1..5));
        let w = normalized((0..m).map(|_| 0.05 + r.random::<f64>()).collect());
        let betas: Vec<f64> = (0..m).map(|_| 0.05 + 0.9 * r.random::<f64>()).collect();
        let gl = random_column_stochastic(n, m, &mut r);
        let gr = random_column_stochastic(n, m, &mut r);
        alpha_err = alpha_err.max((derive_alpha(&w, &betas, &gl, &gr).iter().sum::<f64>() - 1.0).abs());
        let pots = (0..m)
            .map(|_| Ok(Arc::new(Quadratic::random(2, 0.3, 3.0, &mut r)?) as Arc<dyn SmoothConvexFunction>))
            .collect::<barywin::Result<Vec<_>>>()?;
        let sys = CongruentSystem::new(pots, betas, w, gl, gr)?;
        let p = Array2::from_shape_fn((8, 2), |_| r.random::<f64>() - 0.5);
        alpha_err = alpha_err.max(sys.verify_congruence(&p.view())?);
    }
    out.push(CheckRecord::below("alpha_identity", alpha_err, 1e-12));

    let chain = CongruentSystem::identity(2)?;
    let dev = chain
        .alpha()
        .iter()
        .zip([0.25, 0.5, 0.25])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.push(CheckRecord::below("chain_alpha", dev, 1e-15));
    Ok(out)
}
