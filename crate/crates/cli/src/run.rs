//! `barywin run`: one experiment from a resolved config to artifacts on disk.

use std::f64::consts::TAU;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use barywin::bench::BASELINE_SAMPLES;
use barywin::congruent::{make_known_barycenter_dataset, CongruentSystem};
use barywin::gaussian_ref::{bw2_uvp, gaussian_ot_map, location_scatter_members, location_scatter_truth, GaussianMeasure};
use barywin::measures::{base_sampler, batch_moments, make_scatter_population, pushforward, toy2d_sampler, write_csv, AffineMap, BaseKind, LocationScatterSpec, PointMap, Sampler};
use barywin::nn::Mlp;
use barywin::ot_mmr::{fit_inverse_maps, map_error_on, write_loss_csv, MmrPair};
use barywin::rng;
use barywin::win::{constant_shift_baseline, descent_violations, eval_batch, train_with, write_metrics_csv, IterationMetrics, TrainOutcome};
use nalgebra::DVector;
use ndarray::{s, Array2};

use crate::checks::lemma_suite;
use crate::config::{ExperimentConfig, ExperimentKind, Family};
use crate::error::{CliError, CliResult};
use crate::manifest::{CheckRecord, GaussianRecord, Manifest, ReportRow};
use crate::svg::{input_color, scatter_svg, Panel, Series};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SYSTEM_FILE: &str = "system.json";
pub const PLOT_FILE: &str = "scatter.svg";

/// Relative jitter tolerated by the proxy-descent check.
pub const DESCENT_JITTER: f64 = 0.05;

/// Index offsets within the evaluation stream, kept apart from the training probe.
const EVAL_PLOT: u32 = 100;
const EVAL_CHECK: u32 = 200;
const EVAL_INVERSE: u32 = 300;

/// Runs the experiment and returns the directories it wrote.
pub fn run(cfg: &ExperimentConfig, progress: bool) -> CliResult<Vec<PathBuf>> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::GaussianBench => bench(cfg, BaseKind::Gaussian, progress),
        ExperimentKind::UniformBench => bench(cfg, BaseKind::Uniform, progress),
        ExperimentKind::Toy2d => toy2d(cfg, progress).map(|d| vec![d]),
        ExperimentKind::CongruentDataset => congruent_dataset(cfg).map(|d| vec![d]),
        ExperimentKind::WinTrain => win_train(cfg, progress).map(|d| vec![d]),
        ExperimentKind::InverseMaps => inverse_maps(cfg, progress).map(|d| vec![d]),
        ExperimentKind::LemmaChecks => lemma_checks(cfg).map(|d| vec![d]),
    }
}

pub(crate) fn create_dir(p: &Path) -> CliResult<()> {
    fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn create_file(p: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    File::create(p).map(BufWriter::new).map_err(|e| CliError::io(p, e))
}

fn write_text(dir: &Path, rel: &str, text: &str, m: &mut Manifest) -> CliResult<()> {
    let p = dir.join(rel);
    if let Some(parent) = p.parent() {
        create_dir(parent)?;
    }
    fs::write(&p, text).map_err(|e| CliError::io(&p, e))?;
    m.artifacts.push(rel.to_string());
    Ok(())
}

fn save_net(dir: &Path, rel: &str, net: &Mlp, m: &mut Manifest) -> CliResult<()> {
    net.write_checkpoint(create_file(&dir.join(rel))?)?;
    m.artifacts.push(rel.to_string());
    Ok(())
}

fn save_batch(dir: &Path, rel: &str, x: &Array2<f64>, m: &mut Manifest) -> CliResult<()> {
    write_csv(&x.view(), create_file(&dir.join(rel))?)?;
    m.artifacts.push(rel.to_string());
    Ok(())
}

fn reporter(label: String, total: usize, enabled: bool) -> impl FnMut(&IterationMetrics) {
    move |m| {
        if enabled && (m.outer_iter % 5 == 0 || m.outer_iter == total) {
            let uvp = m.uvp_vs_truth.map_or_else(String::new, |u| format!(" uvp {u:.3}%"));
            eprintln!("{label}: iter {}/{total} proxy {:.3e}{uvp}", m.outer_iter, m.proxy_objective);
        }
    }
}

/// Checkpoint names of the generator and the solver pairs.
pub fn generator_checkpoint() -> &'static str {
    "checkpoints/generator.ckpt"
}

pub fn pair_checkpoints(n: usize, prefix: &str) -> (String, String) {
    (format!("{prefix}/map_{n}.ckpt"), format!("{prefix}/potential_{n}.ckpt"))
}

/// BW²-UVP of `G♯S` on the run's evaluation batch.
pub fn generator_uvp(generator: &Mlp, cfg: &ExperimentConfig, truth: &GaussianMeasure) -> CliResult<f64> {
    let latent = base_sampler(BaseKind::Gaussian, generator.input_dim())?;
    let z = eval_batch(&latent, &cfg.win, cfg.seed)?;
    let (m, c) = batch_moments(&generator.forward(&z.view())?.view())?;
    Ok(bw2_uvp(&GaussianMeasure::new_psd(m, c)?, truth)?)
}

/// Metrics, checkpoints and (in 2-D) the scatter plot of a finished training run.
fn record_training(
    dir: &Path,
    cfg: &ExperimentConfig,
    inputs: &[Sampler],
    outcome: &TrainOutcome,
    m: &mut Manifest,
) -> CliResult<()> {
    write_metrics_csv(&outcome.timeline, create_file(&dir.join(METRICS_FILE))?)?;
    m.artifacts.push(METRICS_FILE.to_string());
    save_net(dir, generator_checkpoint(), &outcome.state.generator, m)?;
    for (n, pair) in outcome.state.pairs.iter().enumerate() {
        let (map, pot) = pair_checkpoints(n, "checkpoints");
        save_net(dir, &map, &pair.map, m)?;
        save_net(dir, &pot, &pair.potential, m)?;
    }
    let violations = descent_violations(&outcome.timeline, DESCENT_JITTER);
    m.checks.push(CheckRecord::below("proxy_descent_violations", violations.len() as f64, 1.0));
    if m.dim == 2 {
        let panels = training_panels(cfg, inputs, &outcome.state.generator, &outcome.state.pairs)?;
        write_text(dir, PLOT_FILE, &scatter_svg(&panels), m)?;
    }
    Ok(())
}

fn input_samples(cfg: &ExperimentConfig, inputs: &[Sampler]) -> CliResult<Vec<Array2<f64>>> {
    inputs
        .iter()
        .enumerate()
        .map(|(n, s)| Ok(s.sample(&mut rng::stream(cfg.seed, rng::EVAL, EVAL_PLOT + n as u32), cfg.plot_samples)?))
        .collect()
}

fn generated_samples(cfg: &ExperimentConfig, generator: &Mlp) -> CliResult<Array2<f64>> {
    let latent = base_sampler(BaseKind::Gaussian, generator.input_dim())?;
    let z = latent.sample(&mut rng::stream(cfg.seed, rng::EVAL, EVAL_PLOT - 1), cfg.plot_samples)?;
    Ok(generator.forward(&z.view())?)
}

fn input_series(xs: &[Array2<f64>], name: &str) -> Vec<Series> {
    xs.iter()
        .enumerate()
        .map(|(n, x)| Series::from_batch(format!("{name} {}", n + 1), input_color(n), &x.view()))
        .collect()
}

/// Inputs, generated barycenter and `Tₙ(G(z))`.
fn training_panels(cfg: &ExperimentConfig, inputs: &[Sampler], generator: &Mlp, pairs: &[MmrPair]) -> CliResult<Vec<Panel>> {
    let xs = input_samples(cfg, inputs)?;
    let g = generated_samples(cfg, generator)?;
    let mapped = pairs.iter().map(|p| p.map.forward(&g.view())).collect::<barywin::Result<Vec<_>>>()?;
    Ok(vec![
        Panel {
            title: "input samples".into(),
            series: input_series(&xs, "input"),
        },
        Panel {
            title: "generated barycenter".into(),
            series: vec![Series::from_batch("G(z)", "#222222", &g.view())],
        },
        Panel {
            title: "mapped samples".into(),
            series: input_series(&mapped, "T"),
        },
    ])
}

fn bench(cfg: &ExperimentConfig, base: BaseKind, progress: bool) -> CliResult<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for &d in &cfg.dims {
        let spec = make_scatter_population(d, cfg.weights.len(), cfg.seed)?
            .with_weights(&cfg.weights)?
            .with_base(base);
        let dir = cfg.out.join(format!("d{d}"));
        let mut run_cfg = cfg.clone();
        run_cfg.dims = vec![d];
        let limit = if base == BaseKind::Gaussian { 1.0 } else { 1.5 };
        scatter_run(&run_cfg, &spec, &dir, Some(limit), progress)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Trains on a location-scatter population and scores both methods.
fn scatter_run(cfg: &ExperimentConfig, spec: &LocationScatterSpec, dir: &Path, limit: Option<f64>, progress: bool) -> CliResult<TrainOutcome> {
    let inputs = spec.samplers()?;
    scatter_run_on(cfg, spec, &inputs, dir, limit, progress)
}

fn scatter_run_on(
    cfg: &ExperimentConfig,
    spec: &LocationScatterSpec,
    inputs: &[Sampler],
    dir: &Path,
    limit: Option<f64>,
    progress: bool,
) -> CliResult<TrainOutcome> {
    create_dir(dir)?;
    let d = spec.dim();
    let truth = location_scatter_truth(spec)?;
    let start = Instant::now();
    let label = format!("{} D={d}", cfg.kind.name());
    let outcome = train_with(
        inputs,
        &spec.weights,
        &cfg.win,
        cfg.seed,
        Some(&truth),
        reporter(label, cfg.win.total_outer_iterations, progress),
    )?;
    let wall = start.elapsed().as_secs_f64();
    let cs = constant_shift_baseline(inputs, &spec.weights, BASELINE_SAMPLES, &mut rng::stream(cfg.seed, rng::BASELINE, 0))?;

    let mut m = Manifest::new(cfg, d, spec.weights.clone());
    m.truth = Some(GaussianRecord::from_measure(&truth));
    let uvp = outcome.final_uvp().unwrap_or(f64::NAN);
    m.rows = vec![
        ReportRow {
            dim: d,
            method: "win".into(),
            uvp: Some(uvp),
            iterations: Some(outcome.timeline.len()),
            wall_seconds: Some(wall),
        },
        ReportRow {
            dim: d,
            method: "constant-shift".into(),
            uvp: Some(cs.uvp(&truth)?),
            iterations: None,
            wall_seconds: None,
        },
    ];
    if let Some(l) = limit {
        m.checks.push(CheckRecord::below("uvp_percent", uvp, l));
    }
    record_training(dir, cfg, inputs, &outcome, &mut m)?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    m.write(dir)?;
    Ok(outcome)
}

fn toy2d(cfg: &ExperimentConfig, progress: bool) -> CliResult<PathBuf> {
    let n = cfg.weights.len();
    let shifts: Vec<_> = (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64;
            DVector::from_vec(vec![cfg.toy.spread * a.cos(), cfg.toy.spread * a.sin()])
        })
        .collect();
    let spec = make_scatter_population(2, n, cfg.seed)?
        .with_weights(&cfg.weights)?
        .with_shifts(&shifts)?;
    let toy = toy2d_sampler(cfg.toy.shape)?;
    let inputs = spec
        .members
        .iter()
        .map(|mem| {
            let map: Arc<dyn PointMap> = Arc::new(AffineMap::new(mem.scatter.as_matrix().clone(), mem.shift.clone())?);
            pushforward(&toy, map)
        })
        .collect::<barywin::Result<Vec<_>>>()?;
    scatter_run_on(cfg, &spec, &inputs, &cfg.out, None, progress)?;
    Ok(cfg.out.clone())
}

/// The congruent system a config describes; deterministic in the seed.
pub fn build_system(cfg: &ExperimentConfig) -> CliResult<CongruentSystem> {
    let d = cfg.dim();
    let mut r = rng::stream(cfg.seed, rng::DATASET, 0);
    let sys = match cfg.congruent.family {
        Family::Quadratic => CongruentSystem::random_quadratic(d, cfg.congruent.spectrum[0], cfg.congruent.spectrum[1], &mut r)?,
        Family::LogSumExp => CongruentSystem::random_log_sum_exp(d, &mut r)?,
    };
    Ok(sys.with_solver(cfg.solver)?.with_seed(cfg.seed))
}

/// Congruence residual over the config's check points, with its limit.
pub fn congruence_check(cfg: &ExperimentConfig, sys: &CongruentSystem) -> CliResult<CheckRecord> {
    let base = base_sampler(cfg.congruent.base, sys.dim())?;
    let pts = base.sample(&mut rng::stream(cfg.seed, rng::EVAL, EVAL_CHECK), cfg.congruent.check_points)?;
    let limit = if sys.is_quadratic() { 1e-12 } else { 1e-6 };
    Ok(CheckRecord::below("congruence_residual", sys.verify_congruence(&pts.view())?, limit))
}

fn warn_support(cfg: &ExperimentConfig) {
    if cfg.congruent.base == BaseKind::Uniform {
        eprintln!("note: the uniform base has bounded support, so the barycenter of this dataset is not guaranteed unique");
    }
}

fn congruent_dataset(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    warn_support(cfg);
    let start = Instant::now();
    let sys = build_system(cfg)?;
    let base = base_sampler(cfg.congruent.base, sys.dim())?;
    let data = make_known_barycenter_dataset(&base, &sys)?;
    let dir = cfg.out.clone();
    create_dir(&dir)?;
    let mut m = Manifest::new(cfg, sys.dim(), data.weights.clone());
    m.truth = Some(GaussianRecord::from_measure(&GaussianMeasure::standard(sys.dim())));
    m.checks.push(congruence_check(cfg, &sys)?);

    let text = serde_json::to_string_pretty(&sys.to_json()).expect("descriptor serializes");
    write_text(&dir, SYSTEM_FILE, &(text + "\n"), &mut m)?;
    let n = cfg.congruent.samples;
    let b = base.sample(&mut rng::stream(cfg.seed, rng::DATASET, 1), n)?;
    save_batch(&dir, "samples/base.csv", &b, &mut m)?;
    let mut plotted = Vec::new();
    for (k, input) in data.inputs.iter().enumerate() {
        let x = input.sample(&mut rng::stream(cfg.seed, rng::DATASET, 2 + k as u32), n)?;
        save_batch(&dir, &format!("samples/input_{k}.csv"), &x, &mut m)?;
        plotted.push(x.slice(s![..cfg.plot_samples.min(n), ..]).to_owned());
    }
    if sys.dim() == 2 {
        let b = b.slice(s![..cfg.plot_samples.min(n), ..]).to_owned();
        let panels = vec![
            Panel {
                title: "inputs".into(),
                series: input_series(&plotted, "input"),
            },
            Panel {
                title: "barycenter (base)".into(),
                series: vec![Series::from_batch("base", "#222222", &b.view())],
            },
        ];
        write_text(&dir, PLOT_FILE, &scatter_svg(&panels), &mut m)?;
    }
    m.wall_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    Ok(dir)
}

fn win_train(cfg: &ExperimentConfig, progress: bool) -> CliResult<PathBuf> {
    warn_support(cfg);
    let start = Instant::now();
    let sys = build_system(cfg)?;
    let d = sys.dim();
    let base = base_sampler(cfg.congruent.base, d)?;
    let data = make_known_barycenter_dataset(&base, &sys)?;
    let truth = GaussianMeasure::standard(d);
    let dir = cfg.out.clone();
    create_dir(&dir)?;
    let t0 = Instant::now();
    let outcome = train_with(
        &data.inputs,
        &data.weights,
        &cfg.win,
        cfg.seed,
        Some(&truth),
        reporter(format!("win-train D={d}"), cfg.win.total_outer_iterations, progress),
    )?;
    let wall = t0.elapsed().as_secs_f64();
    let mut m = Manifest::new(cfg, d, data.weights.clone());
    m.truth = Some(GaussianRecord::from_measure(&truth));
    let uvp = outcome.final_uvp().unwrap_or(f64::NAN);
    m.rows.push(ReportRow {
        dim: d,
        method: "win".into(),
        uvp: Some(uvp),
        iterations: Some(outcome.timeline.len()),
        wall_seconds: Some(wall),
    });
    m.checks.push(congruence_check(cfg, &sys)?);
    m.checks.push(CheckRecord::below("uvp_percent", uvp, 2.0));
    let text = serde_json::to_string_pretty(&sys.to_json()).expect("descriptor serializes");
    write_text(&dir, SYSTEM_FILE, &(text + "\n"), &mut m)?;
    record_training(&dir, cfg, &data.inputs, &outcome, &mut m)?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    Ok(dir)
}

/// Normalized errors of the inverse maps against the closed form, and of
/// forward-then-inverse round trips on the generated barycenter.
pub fn inverse_checks(
    cfg: &ExperimentConfig,
    spec: &LocationScatterSpec,
    generator: &Mlp,
    forward: &[Mlp],
    inverse: &[Mlp],
) -> CliResult<Vec<CheckRecord>> {
    let truth = location_scatter_truth(spec)?;
    let members = location_scatter_members(spec)?;
    let inputs = spec.samplers()?;
    let scale = truth.cov.trace();
    let mut out = Vec::new();
    for (n, (inv, member)) in inverse.iter().zip(&members).enumerate() {
        let x = inputs[n].sample(&mut rng::stream(cfg.seed, rng::EVAL, EVAL_INVERSE + n as u32), 1 << 14)?;
        let exact = gaussian_ot_map(member, &truth)?;
        out.push(CheckRecord::below(format!("inverse_map_error_{n}"), map_error_on(inv, &exact, &x.view(), scale)?, 0.03));
    }
    let latent = base_sampler(BaseKind::Gaussian, generator.input_dim())?;
    let z = latent.sample(&mut rng::stream(cfg.seed, rng::EVAL, EVAL_INVERSE - 1), 1 << 14)?;
    let y = generator.forward(&z.view())?;
    for (n, (fwd, inv)) in forward.iter().zip(inverse).enumerate() {
        let back = inv.forward(&fwd.forward(&y.view())?.view())?;
        let err = (&back - &y).mapv(|v| v * v).sum() / (y.nrows() as f64 * scale);
        out.push(CheckRecord::below(format!("round_trip_error_{n}"), err, 0.05));
    }
    Ok(out)
}

fn inverse_maps(cfg: &ExperimentConfig, progress: bool) -> CliResult<PathBuf> {
    let d = cfg.dim();
    let spec = make_scatter_population(d, cfg.weights.len(), cfg.seed)?.with_weights(&cfg.weights)?;
    let dir = cfg.out.clone();
    let outcome = scatter_run(cfg, &spec, &dir, None, progress)?;
    let inputs = spec.samplers()?;
    if progress {
        eprintln!("inverse-maps D={d}: fitting {} inverse maps", inputs.len());
    }
    let fitted = fit_inverse_maps(&outcome.state.generator, &outcome.state.latent, &inputs, &cfg.inverse, cfg.seed)?;

    let mut m = Manifest::read(&dir.join(crate::manifest::MANIFEST_FILE))?;
    for (n, (pair, trace)) in fitted.pairs.iter().zip(&fitted.traces).enumerate() {
        let (map, pot) = pair_checkpoints(n, "inverse");
        save_net(&dir, &map, &pair.map, &mut m)?;
        save_net(&dir, &pot, &pair.potential, &mut m)?;
        let rel = format!("inverse/loss_{n}.csv");
        write_loss_csv(trace, create_file(&dir.join(&rel))?)?;
        m.artifacts.push(rel);
    }
    let forward: Vec<Mlp> = outcome.state.pairs.iter().map(|p| p.map.clone()).collect();
    let inverse: Vec<Mlp> = fitted.pairs.iter().map(|p| p.map.clone()).collect();
    m.checks.extend(inverse_checks(cfg, &spec, &outcome.state.generator, &forward, &inverse)?);
    if d == 2 {
        let xs = input_samples(cfg, &inputs)?;
        let pulled = inverse
            .iter()
            .zip(&xs)
            .map(|(inv, x)| inv.forward(&x.view()))
            .collect::<barywin::Result<Vec<_>>>()?;
        let g = generated_samples(cfg, &outcome.state.generator)?;
        let panels = vec![
            Panel {
                title: "input samples".into(),
                series: input_series(&xs, "input"),
            },
            Panel {
                title: "generated barycenter".into(),
                series: vec![Series::from_batch("G(z)", "#222222", &g.view())],
            },
            Panel {
                title: "inverse-mapped inputs".into(),
                series: input_series(&pulled, "inverse"),
            },
        ];
        write_text(&dir, "inverse.svg", &scatter_svg(&panels), &mut m)?;
    }
    m.write(&dir)?;
    Ok(dir)
}

fn lemma_checks(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let start = Instant::now();
    let dir = cfg.out.clone();
    create_dir(&dir)?;
    let mut m = Manifest::new(cfg, *cfg.dims.iter().max().expect("validated"), cfg.weights.clone());
    m.checks = lemma_suite(cfg)?;
    m.wall_seconds = start.elapsed().as_secs_f64();
    m.write(&dir)?;
    let failed = m.checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(CliError::Verification { failed });
    }
    Ok(dir)
}
