//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use barywin::bench::{baseline_uvp, benchmark_population, run_scatter_benchmark, BenchmarkRun};
use barywin::congruent::{derive_alpha, make_known_barycenter_dataset, random_column_stochastic, CongruentSystem, Quadratic};
use barywin::gaussian_ref::{
    fixed_point_residual, gaussian_barycenter, gaussian_barycenter_measure, gaussian_barycenter_solve, gaussian_ot_map, location_scatter_members,
    location_scatter_truth, FixedPointConfig, GaussianMeasure,
};
use barywin::linalg::{rel_frobenius, SpdMatrix};
use barywin::measures::{batch_moments, BaseKind, Sampler};
use barywin::nn::{default_hidden, layer_sizes, LrSchedule, Mlp};
use barywin::ot_mmr::{map_error_on, mean_sq_displacement, mmr_update, MmrConfig, MmrPair};
use barywin::rng;
use barywin::win::{descent_violations, lemma1_gradient_check, train, WinConfig};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;

const DIMS: [usize; 4] = [2, 4, 8, 16];
const SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn fmt_list(xs: &[(usize, f64)], prec: usize) -> String {
    xs.iter()
        .map(|(d, v)| format!("D={d}:{v:.prec$}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn gaussian(mean: DVector<f64>, cov: SpdMatrix) -> GaussianMeasure {
    GaussianMeasure::new(mean, cov).expect("valid Gaussian")
}

fn sampler(g: &GaussianMeasure) -> Sampler {
    Sampler::gaussian(&g.mean, &g.cov).expect("valid sampler")
}

fn benchmark_runs(base: BaseKind) -> Vec<BenchmarkRun> {
    DIMS.iter()
        .map(|&d| {
            let spec = benchmark_population(d, base, SEED).expect("population");
            let run = run_scatter_benchmark(&spec, &WinConfig::desk(), SEED, |_| {}).expect("training");
            println!(
                "    run {base} D={d}: UVP {:.3}% baseline {:.2}% in {:.0}s",
                run.report.uvp, run.report.baseline_uvp, run.report.wall_seconds
            );
            run
        })
        .collect()
}

fn uvp_criterion(runs: &[BenchmarkRun], limit: f64) -> Verdict {
    let uvps: Vec<_> = runs.iter().map(|r| (r.report.dim, r.report.uvp)).collect();
    let pass = uvps.iter().all(|(_, u)| *u < limit);
    let cfg = WinConfig::desk();
    let steps_v = cfg.warmup_k_v + cfg.total_outer_iterations * cfg.k_v;
    verdict(
        pass,
        format!(
            "UVP% {} (limit {limit}); steps per network G={} v={} T={} at batch {}",
            fmt_list(&uvps, 3),
            cfg.total_outer_iterations * cfg.k_g,
            steps_v,
            steps_v * cfg.k_t,
            cfg.batch_size
        ),
    )
}

fn criterion3() -> Verdict {
    let mut worst = 0.0_f64;
    let mut rows = Vec::new();
    for base in [BaseKind::Gaussian, BaseKind::Uniform] {
        for &d in &DIMS {
            let spec = benchmark_population(d, base, SEED).expect("population");
            let truth = location_scatter_truth(&spec).expect("truth");
            let u = baseline_uvp(&spec, &truth, SEED).expect("baseline");
            worst = worst.max((u - 100.0).abs());
            rows.push(format!("{base}/D={d}:{u:.4}"));
        }
    }
    verdict(worst < 1.0, format!("{} (max |UVP-100| = {worst:.2e})", rows.join(" ")))
}

fn criterion4() -> Verdict {
    let cfg = FixedPointConfig::default();
    let mut max_res = 0.0_f64;
    let mut max_cong = 0.0_f64;
    for base in [BaseKind::Gaussian] {
        for &d in &DIMS {
            let spec = benchmark_population(d, base, SEED).expect("population");
            let covs: Vec<_> = (0..spec.members.len()).map(|n| spec.member_covariance(n)).collect();
            let sol = gaussian_barycenter_solve(&covs, &spec.weights, cfg).expect("fixed point");
            let recheck = fixed_point_residual(&sol.cov, &covs, &spec.weights).expect("residual");
            max_res = max_res.max(sol.residual).max(recheck);
            let bary = gaussian(DVector::zeros(d), sol.cov);
            let members = location_scatter_members(&spec).expect("members");
            let sum = members.iter().zip(&spec.weights).fold(DMatrix::zeros(d, d), |acc, (m, &a)| {
                acc + gaussian_ot_map(&bary, m).expect("map").matrix() * a
            });
            max_cong = max_cong.max((sum - DMatrix::identity(d, d)).abs().max());
        }
    }
    let mut r = rng::seeded(41);
    let mut max_1d = 0.0_f64;
    for _ in 0..100 {
        let n = r.random_range(2..6);
        let sig: Vec<f64> = (0..n).map(|_| 0.1 + 3.0 * r.random::<f64>()).collect();
        let raw: Vec<f64> = (0..n).map(|_| 0.05 + r.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        w[0] = 1.0 - w[1..].iter().sum::<f64>();
        let covs: Vec<_> = sig.iter().map(|s| SpdMatrix::from_diagonal(&[s * s]).unwrap()).collect();
        let s = gaussian_barycenter(&covs, &w).expect("1-D barycenter");
        let expect: f64 = sig.iter().zip(&w).map(|(s, a)| s * a).sum();
        max_1d = max_1d.max((s.as_matrix()[(0, 0)].sqrt() - expect).abs());
    }
    verdict(
        max_res < 1e-12 && max_1d < 1e-12 && max_cong < 1e-8,
        format!("fixed-point residual {max_res:.1e} (<1e-12), 1-D sigma error {max_1d:.1e} (<1e-12), max|sum a_n A_n - I| {max_cong:.1e} (<1e-8)"),
    )
}

fn criterion5() -> Verdict {
    let mut worst = 0.0_f64;
    let mut rows = Vec::new();
    for &d in &DIMS {
        let spec = benchmark_population(d, BaseKind::Gaussian, SEED).expect("population");
        let members = location_scatter_members(&spec).expect("members");
        let mut r = rng::seeded(50 + d as u64);
        let g = Mlp::he_init_with(&layer_sizes(d, &default_hidden(d), d), &mut r).expect("generator");
        let z = common::gaussian_batch(256, d, &mut r);
        let (m, c) = batch_moments(&g.forward(&z.view()).unwrap().view()).expect("moments");
        let est = gaussian(m, c);
        let maps: Vec<_> = members.iter().map(|p| gaussian_ot_map(&est, p).expect("map")).collect();
        let cmp = lemma1_gradient_check(&g, &maps, &spec.weights, &z.view()).expect("gradient check");
        worst = worst.max(cmp.relative_difference);
        rows.push((d, cmp.relative_difference));
    }
    verdict(worst < 1e-6, format!("relative L2 difference {} (limit 1e-6)", fmt_list_e(&rows)))
}

fn fmt_list_e(xs: &[(usize, f64)]) -> String {
    xs.iter().map(|(d, v)| format!("D={d}:{v:.1e}")).collect::<Vec<_>>().join(" ")
}

fn random_points(n: usize, d: usize, scale: f64, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| scale * (2.0 * r.random::<f64>() - 1.0))
}

fn criterion6() -> Verdict {
    let mut r = rng::seeded(60);
    let mut quad = 0.0_f64;
    for d in [2, 4, 8] {
        let sys = CongruentSystem::random_quadratic(d, 0.2, 5.0, &mut r).expect("system");
        quad = quad.max(sys.verify_congruence(&random_points(1024, d, 3.0, &mut r).view()).expect("residual"));
    }
    let mut lse = 0.0_f64;
    for d in [2, 4] {
        let sys = CongruentSystem::random_log_sum_exp(d, &mut r).expect("system");
        lse = lse.max(sys.verify_congruence(&random_points(1024, d, 3.0, &mut r).view()).expect("residual"));
    }
    let mut alpha_err = 0.0_f64;
    let mut random_cong = 0.0_f64;
    for _ in 0..100 {
        let (n, m) = (r.random_range(1..6), r.random_range(1..5));
        let raw: Vec<f64> = (0..m).map(|_| 0.05 + r.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let mut w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        w[0] = 1.0 - w[1..].iter().sum::<f64>();
        let betas: Vec<f64> = (0..m).map(|_| 0.05 + 0.9 * r.random::<f64>()).collect();
        let gl = random_column_stochastic(n, m, &mut r);
        let gr = random_column_stochastic(n, m, &mut r);
        alpha_err = alpha_err.max((derive_alpha(&w, &betas, &gl, &gr).iter().sum::<f64>() - 1.0).abs());
        let pots = (0..m)
            .map(|_| Arc::new(Quadratic::random(3, 0.3, 3.0, &mut r).unwrap()) as Arc<dyn barywin::congruent::SmoothConvexFunction>)
            .collect();
        if let Ok(sys) = CongruentSystem::new(pots, betas, w, gl, gr) {
            random_cong = random_cong.max(sys.verify_congruence(&random_points(16, 3, 3.0, &mut r).view()).unwrap());
        }
    }
    let chain = CongruentSystem::identity(2).expect("chain layout");
    let chain_err = chain
        .alpha()
        .iter()
        .zip([0.25, 0.5, 0.25])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    verdict(
        quad < 1e-12 && lse < 1e-6 && alpha_err < 1e-12 && random_cong < 1e-12 && chain_err < 1e-15,
        format!(
            "quadratic {quad:.1e} (<1e-12), log-sum-exp {lse:.1e} over 2x1024 pts (<1e-6), alpha sum {alpha_err:.1e} over 100 draws (<1e-12; congruence {random_cong:.1e}), chain alpha = {:?}",
            chain.alpha()
        ),
    )
}

fn criterion7() -> Verdict {
    let mut r = rng::seeded(70);
    let mut cov_err = 0.0_f64;
    for d in [2, 4, 8] {
        let sys = CongruentSystem::random_quadratic(d, 0.3, 3.0, &mut r).expect("system");
        let mean = DVector::from_fn(d, |_, _| r.random::<f64>() - 0.5);
        let q = barywin::linalg::random_rotation(d, &mut r).unwrap();
        let eig = DVector::from_fn(d, |_, _| 0.5 + r.random::<f64>());
        let cov = &q.transpose() * DMatrix::from_diagonal(&eig) * &q;
        let base = gaussian(mean, SpdMatrix::new((&cov + cov.transpose()) * 0.5).unwrap());
        let inputs: Vec<_> = sys
            .system_matrices()
            .expect("quadratic")
            .iter()
            .map(|b| {
                let c = b * base.cov.as_matrix() * b.transpose();
                gaussian(b * &base.mean, SpdMatrix::new((&c + c.transpose()) * 0.5).unwrap())
            })
            .collect();
        let bary = gaussian_barycenter_measure(&inputs, sys.alpha()).expect("barycenter");
        cov_err = cov_err
            .max(rel_frobenius(bary.cov.as_matrix(), base.cov.as_matrix()))
            .max((&bary.mean - &base.mean).norm());
    }

    let sys = CongruentSystem::random_quadratic(2, 0.3, 3.0, &mut r).expect("system");
    let base = gaussian(DVector::from_vec(vec![0.5, -0.3]), SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.6])).unwrap());
    let data = make_known_barycenter_dataset(&sampler(&base), &sys).expect("dataset");
    let out = train(&data.inputs, &data.weights, &WinConfig::desk(), SEED, Some(&base)).expect("training");
    let uvp = out.final_uvp().unwrap_or(f64::NAN);
    verdict(
        cov_err < 1e-6 && uvp < 2.0,
        format!("closed-form recovery error {cov_err:.1e} (<1e-6), trained D=2 UVP {uvp:.3}% (<2%)"),
    )
}

fn mmr_cfg(k_v: usize, decay_every: u64) -> MmrConfig {
    MmrConfig {
        k_v,
        k_t: 5,
        batch_size: 256,
        lr_v: LrSchedule::new(1e-3, decay_every, 0.5).unwrap(),
        lr_t: LrSchedule::new(1e-3, decay_every * 5, 0.5).unwrap(),
    }
}

fn trained_pair(p: &GaussianMeasure, q: &GaussianMeasure, cfg: &MmrConfig, seed: u64) -> MmrPair {
    let mut pair = MmrPair::init_default(p.dim(), seed, 0).expect("pair");
    mmr_update(&mut pair, &sampler(p), &sampler(q), cfg, &mut rng::seeded(seed)).expect("training");
    pair
}

fn criterion8() -> Verdict {
    let mut ident = Vec::new();
    for d in [2, 4] {
        let g = GaussianMeasure::standard(d);
        let pair = trained_pair(&g, &g, &mmr_cfg(300, 10_000), 80 + d as u64);
        let x = sampler(&g).sample_seeded(81, 1 << 14).unwrap();
        ident.push((d, mean_sq_displacement(&pair.map, &x.view()).unwrap() / d as f64));
    }

    let mut errs = Vec::new();
    let p = GaussianMeasure::standard(1);
    let q = gaussian(DVector::from_vec(vec![2.0]), SpdMatrix::from_diagonal(&[4.0]).unwrap());
    let pair = trained_pair(&p, &q, &mmr_cfg(1600, 400), 2);
    let x = sampler(&p).sample_seeded(98, 1 << 14).unwrap();
    errs.push((1, map_error_on(&pair.map, &gaussian_ot_map(&p, &q).unwrap(), &x.view(), q.cov.trace()).unwrap()));

    let spec = benchmark_population(4, BaseKind::Gaussian, SEED).expect("population");
    let truth = location_scatter_truth(&spec).expect("truth");
    let target = &location_scatter_members(&spec).expect("members")[1];
    let pair = trained_pair(&truth, target, &mmr_cfg(600, 10_000), 5);
    let x = sampler(&truth).sample_seeded(97, 1 << 14).unwrap();
    errs.push((4, map_error_on(&pair.map, &gaussian_ot_map(&truth, target).unwrap(), &x.view(), target.cov.trace()).unwrap()));

    let pass = ident.iter().all(|(_, v)| *v < 0.05) && errs.iter().all(|(_, e)| *e < 0.02);
    verdict(
        pass,
        format!(
            "normalized map error {} (<0.02); identity msd/D {} (<0.05)",
            fmt_list(&errs, 4),
            fmt_list(&ident, 4)
        ),
    )
}

fn criterion9() -> Verdict {
    let mut shapes: Vec<Vec<usize>> = vec![vec![3, 2], vec![2, 5, 1], vec![4, 8, 8, 4]];
    for d in [1, 2, 3, 4, 8, 16, 64] {
        let h = default_hidden(d);
        shapes.push(layer_sizes(d, &h, d));
        shapes.push(layer_sizes(d, &h, 1));
    }
    let mut r = rng::seeded(90);
    let mut worst = 0.0_f64;
    let mut probed = 0;
    let mut skipped = 0;
    let mut short = false;
    for s in &shapes {
        let net = Mlp::he_init_with(s, &mut r).expect("network");
        let rep = common::fd_check(&net, 4, 100, &mut r);
        worst = worst.max(rep.max_rel_err);
        probed += rep.probed;
        skipped += rep.kinks_skipped;
        short |= rep.probed < 100;
    }
    verdict(
        worst < 1e-4 && !short,
        format!(
            "{} shapes, {probed} parameter probes plus input probes, max relative error {worst:.1e} (<1e-4); {skipped} probes redrawn at ReLU kinks",
            shapes.len()
        ),
    )
}

fn criterion10(gauss: &[BenchmarkRun], unif: &[BenchmarkRun]) -> Verdict {
    let describe = |runs: &[BenchmarkRun]| -> (bool, String) {
        let mut ok = true;
        let parts: Vec<String> = runs
            .iter()
            .map(|r| {
                let v = descent_violations(r.timeline(), 0.05);
                ok &= v.is_empty();
                let worst = r
                    .timeline()
                    .windows(2)
                    .map(|w| w[1].proxy_objective / w[0].proxy_objective - 1.0)
                    .fold(f64::NEG_INFINITY, f64::max);
                format!("D={}:max_rise={:+.2}%", r.report.dim, 100.0 * worst)
            })
            .collect();
        (ok, parts.join(" "))
    };
    let (g_ok, g) = describe(gauss);
    let (_, u) = describe(unif);
    verdict(g_ok, format!("gaussian runs {g} (limit +5%); uniform runs, informational: {u}"))
}

fn report(id: usize, title: &str, v: &Verdict, start: Instant, failures: &mut usize) {
    if !v.pass {
        *failures += 1;
    }
    println!(
        "[{}] AC{id} {title}: {} ({:.0}s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
}

fn main() -> ExitCode {
    let mut failures = 0;
    println!("acceptance: location-scatter dims {DIMS:?}, seed {SEED}");

    let t = Instant::now();
    report(4, "exact Gaussian fixed point", &criterion4(), t, &mut failures);
    let t = Instant::now();
    report(5, "regression/variational gradient equivalence", &criterion5(), t, &mut failures);
    let t = Instant::now();
    report(6, "congruence property suite", &criterion6(), t, &mut failures);
    let t = Instant::now();
    report(9, "finite-difference gradients", &criterion9(), t, &mut failures);
    let t = Instant::now();
    report(3, "constant-shift baseline scores 100%", &criterion3(), t, &mut failures);
    let t = Instant::now();
    report(8, "maximin solver oracle", &criterion8(), t, &mut failures);
    let t = Instant::now();
    report(7, "closed-loop congruent dataset", &criterion7(), t, &mut failures);

    let t = Instant::now();
    let gauss = benchmark_runs(BaseKind::Gaussian);
    report(1, "Gaussian-base benchmark UVP < 1%", &uvp_criterion(&gauss, 1.0), t, &mut failures);
    let t = Instant::now();
    let unif = benchmark_runs(BaseKind::Uniform);
    report(2, "uniform-base benchmark UVP < 1.5%", &uvp_criterion(&unif, 1.5), t, &mut failures);
    let t = Instant::now();
    report(10, "proxy objective descent", &criterion10(&gauss, &unif), t, &mut failures);

    println!("acceptance: {} of 10 criteria passed", 10 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
