//! Fixed-point barycenter iteration with a generator.
//!
//! The evolving estimate is `G♯S` for a latent Gaussian `S`. Every outer
//! iteration first refreshes the solver pairs `(Tₙ, vₙ)` towards the maps
//! `G♯S → Pₙ`, then regresses `G` onto `Σ αₙ Tₙ(G₀(z))` where `G₀` is a
//! frozen copy of `G` taken once before the regression.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use ndarray::{Array2, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian_ref::{bures_w2_sq, bw2_uvp, GaussianMeasure};
use crate::linalg::SpdMatrix;
use crate::measures::{
    base_sampler, batch_moments, empirical_moments, pushforward, validate_weights, AffineMap, BaseKind, PointMap, Sampler,
};
use crate::nn::{default_hidden, layer_sizes, AdamState, Batch, LrSchedule, Mlp};
use crate::ot_mmr::{mmr_update, LossRecord, MmrConfig, MmrPair};
use crate::rng::{self, StreamRng};

/// Every knob of the outer loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WinConfig {
    /// Generator regression steps per outer iteration; 0 freezes the generator.
    pub k_g: usize,
    pub k_v: usize,
    pub k_t: usize,
    pub batch_size: usize,
    pub lr_g: LrSchedule,
    pub lr_v: LrSchedule,
    pub lr_t: LrSchedule,
    pub total_outer_iterations: usize,
    /// Latent dimension `H`; defaults to the data dimension.
    pub latent_dim: Option<usize>,
    /// Hidden widths for all networks; defaults to `max(100, 2D)` three times.
    pub hidden: Option<Vec<usize>>,
    /// Zero the solver optimizers' moments at every outer iteration.
    pub reset_solver_optimizers: bool,
    /// Extra potential steps for each solver pair before the first outer iteration.
    pub warmup_k_v: usize,
    /// Latent draws used for the per-iteration moment diagnostics.
    pub eval_samples: usize,
    /// Draws used once per input to estimate its moments.
    pub input_moment_samples: usize,
    /// Train the solver pairs on scoped threads (results are identical; each
    /// pair owns its random stream).
    pub parallel_solvers: bool,
}

impl Default for WinConfig {
    fn default() -> Self {
        WinConfig {
            k_g: 50,
            k_v: 50,
            k_t: 10,
            batch_size: 1024,
            lr_g: LrSchedule::new(1e-4, 10_000, 0.5).expect("valid"),
            lr_v: LrSchedule::new(1e-3, 10_000, 0.5).expect("valid"),
            lr_t: LrSchedule::new(1e-3, 10_000, 0.5).expect("valid"),
            total_outer_iterations: 240,
            latent_dim: None,
            hidden: None,
            reset_solver_optimizers: false,
            warmup_k_v: 0,
            eval_samples: 1 << 15,
            input_moment_samples: 100_000,
            parallel_solvers: false,
        }
    }
}

impl WinConfig {
    /// Reduced single-core budget for the location-scatter benchmarks:
    /// batch 256, `K_v = 20`, `K_T = 5`, 30 outer iterations and a short
    /// potential warm-up.
    pub fn desk() -> Self {
        WinConfig {
            k_v: 20,
            k_t: 5,
            batch_size: 256,
            lr_g: LrSchedule::new(1e-3, 10_000, 0.5).expect("valid"),
            total_outer_iterations: 30,
            warmup_k_v: 150,
            ..WinConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k_v == 0 || self.k_t == 0 {
            return Err(Error::validation("batch_size, k_v and k_t must be positive"));
        }
        if self.total_outer_iterations == 0 {
            return Err(Error::validation("total_outer_iterations must be positive"));
        }
        if self.eval_samples < 2 || self.input_moment_samples < 2 {
            return Err(Error::validation("moment estimates need at least two samples"));
        }
        if matches!(self.latent_dim, Some(0)) {
            return Err(Error::validation("latent_dim must be positive"));
        }
        if let Some(h) = &self.hidden {
            if h.contains(&0) {
                return Err(Error::validation("hidden widths must be positive"));
            }
        }
        self.lr_g.validate()?;
        self.mmr().validate()
    }

    pub fn mmr(&self) -> MmrConfig {
        MmrConfig {
            k_v: self.k_v,
            k_t: self.k_t,
            batch_size: self.batch_size,
            lr_v: self.lr_v,
            lr_t: self.lr_t,
        }
    }

    pub fn hidden_for(&self, dim: usize) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| default_hidden(dim))
    }
}

/// Generator, solver pairs and bookkeeping of one run.
#[derive(Debug, Clone)]
pub struct WinState {
    pub generator: Mlp,
    pub generator_opt: AdamState,
    pub pairs: Vec<MmrPair>,
    pub weights: Vec<f64>,
    pub latent: Sampler,
    pub outer_iteration: usize,
}

impl WinState {
    pub fn new(generator: Mlp, pairs: Vec<MmrPair>, weights: Vec<f64>) -> Result<Self> {
        validate_weights(&weights)?;
        if pairs.len() != weights.len() {
            return Err(Error::validation(format!(
                "{} solver pairs for {} weights",
                pairs.len(),
                weights.len()
            )));
        }
        let d = generator.output_dim();
        if let Some(p) = pairs.iter().find(|p| p.dim() != d) {
            return Err(Error::validation(format!(
                "solver pair of dimension {} for a {d}-dimensional generator",
                p.dim()
            )));
        }
        let latent = base_sampler(BaseKind::Gaussian, generator.input_dim())?;
        let generator_opt = AdamState::new(generator.num_params());
        Ok(WinState {
            generator,
            generator_opt,
            pairs,
            weights,
            latent,
            outer_iteration: 0,
        })
    }

    /// Fresh He-initialized networks for `weights.len()` inputs of dimension `dim`.
    pub fn init(dim: usize, weights: &[f64], cfg: &WinConfig, seed: u64) -> Result<Self> {
        let hidden = cfg.hidden_for(dim);
        let h = cfg.latent_dim.unwrap_or(dim);
        let generator = Mlp::he_init_with(&layer_sizes(h, &hidden, dim), &mut rng::stream(seed, rng::INIT, 0))?;
        let pairs = (0..weights.len())
            .map(|n| MmrPair::init(dim, &hidden, seed, n as u32))
            .collect::<Result<Vec<_>>>()?;
        WinState::new(generator, pairs, weights.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.generator.output_dim()
    }

    /// `G♯S` with the current generator.
    pub fn generated(&self) -> Result<Sampler> {
        pushforward(&self.latent, Arc::new(self.generator.clone()))
    }
}

/// Independent random streams of a run: one for the generator phase, one per solver pair.
#[derive(Debug, Clone)]
pub struct WinRngs {
    pub generator: StreamRng,
    pub solvers: Vec<StreamRng>,
}

impl WinRngs {
    pub fn new(seed: u64, n_inputs: usize) -> Self {
        WinRngs {
            generator: rng::stream(seed, rng::LATENT, 0),
            solvers: (0..n_inputs).map(|n| rng::stream(seed, rng::SOLVER, n as u32)).collect(),
        }
    }
}

/// The latent draws behind every moment diagnostic of a run with `seed`.
pub fn eval_batch(latent: &Sampler, cfg: &WinConfig, seed: u64) -> Result<Batch> {
    latent.sample(&mut rng::stream(seed, rng::EVAL, 0), cfg.eval_samples)
}

/// Fixed evaluation batch and input moments for the moment diagnostics.
#[derive(Debug, Clone)]
pub struct MomentProbe {
    pub latent_batch: Batch,
    pub input_moments: Vec<GaussianMeasure>,
    pub truth: Option<GaussianMeasure>,
}

impl MomentProbe {
    pub fn new(
        latent: &Sampler,
        inputs: &[Sampler],
        cfg: &WinConfig,
        seed: u64,
        truth: Option<GaussianMeasure>,
    ) -> Result<Self> {
        let latent_batch = eval_batch(latent, cfg, seed)?;
        let input_moments = inputs
            .iter()
            .enumerate()
            .map(|(n, s)| {
                let (m, c) = empirical_moments(s, cfg.input_moment_samples, &mut rng::stream(seed, rng::EVAL, n as u32 + 1))?;
                GaussianMeasure::new_psd(m, c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MomentProbe {
            latent_batch,
            input_moments,
            truth,
        })
    }

    /// Mean and covariance of `G(z)` over the probe batch.
    pub fn generated_moments(&self, generator: &Mlp) -> Result<GaussianMeasure> {
        let x = generator.forward(&self.latent_batch.view())?;
        let (m, c) = batch_moments(&x.view())?;
        GaussianMeasure::new_psd(m, c)
    }

    /// `Σ αₙ BW²(moments(G♯S), moments(Pₙ))`
    pub fn proxy_objective(&self, generated: &GaussianMeasure, weights: &[f64]) -> Result<f64> {
        self.input_moments
            .iter()
            .zip(weights)
            .try_fold(0.0, |acc, (p, &a)| Ok(acc + a * bures_w2_sq(generated, p)?))
    }
}

/// What one outer iteration did.
#[derive(Debug, Clone)]
pub struct OuterDiagnostics {
    pub outer_iteration: usize,
    pub solver_traces: Vec<Vec<LossRecord>>,
    pub loss_g: Vec<f64>,
    pub proxy_objective: Option<f64>,
    pub uvp: Option<f64>,
}

impl OuterDiagnostics {
    pub fn loss_g_mean(&self) -> f64 {
        if self.loss_g.is_empty() {
            f64::NAN
        } else {
            self.loss_g.iter().sum::<f64>() / self.loss_g.len() as f64
        }
    }
}

/// `Σ αₙ Tₙ(G₀(z))` for a latent batch.
pub fn regression_target(snapshot: &Mlp, maps: &[&dyn PointMap], weights: &[f64], z: &ArrayView2<f64>) -> Result<Batch> {
    let x0 = snapshot.forward(z)?;
    let mut target = Array2::zeros(x0.dim());
    for (map, &a) in maps.iter().zip(weights) {
        target.scaled_add(a, &map.apply(&x0.view())?);
    }
    Ok(target)
}

/// `½ mean ‖G(z) − target‖²` and its gradient with respect to the generator.
pub fn regression_loss_grad(generator: &Mlp, z: &ArrayView2<f64>, target: &ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
    let b = z.nrows() as f64;
    let tape = generator.forward_tape(z)?;
    let diff = tape.output() - target;
    let loss = 0.5 * diff.mapv(|v| v * v).sum() / b;
    let g = generator.param_grad_tape(&tape, &(diff / b).view())?;
    Ok((loss, g))
}

/// Step 1: refresh every solver pair against `G♯S`.
pub fn update_solvers(state: &mut WinState, inputs: &[Sampler], cfg: &MmrConfig, rngs: &mut WinRngs, parallel: bool) -> Result<Vec<Vec<LossRecord>>> {
    let generated = state.generated()?;
    let jobs = state.pairs.iter_mut().zip(inputs).zip(rngs.solvers.iter_mut());
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .map(|((pair, input), r)| {
                    let generated = generated.clone();
                    scope.spawn(move || mmr_update(pair, &generated, input, cfg, r))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::numerical("solver", 0, "worker panicked"))))
                .collect()
        })
    } else {
        jobs.map(|((pair, input), r)| mmr_update(pair, &generated, input, cfg, r)).collect()
    }
}

/// Step 2: `k_g` descent steps regressing `G` onto the frozen-snapshot target.
pub fn regress_generator(
    state: &mut WinState,
    snapshot: &Mlp,
    k_g: usize,
    batch_size: usize,
    lr_g: &LrSchedule,
    rng: &mut dyn RngCore,
) -> Result<Vec<f64>> {
    let maps: Vec<&dyn PointMap> = state.pairs.iter().map(|p| &p.map as &dyn PointMap).collect();
    let mut losses = Vec::with_capacity(k_g);
    for _ in 0..k_g {
        let step = state.generator_opt.step_count() as usize;
        let z = state.latent.sample(rng, batch_size)?;
        let target = regression_target(snapshot, &maps, &state.weights, &z.view())?;
        let (loss, g) = regression_loss_grad(&state.generator, &z.view(), &target.view())?;
        if !loss.is_finite() {
            return Err(Error::numerical("generator", step, format!("loss is {loss}")));
        }
        state
            .generator_opt
            .step(state.generator.params_mut(), &g, lr_g)
            .map_err(|e| Error::numerical("generator", step, e.to_string()))?;
        losses.push(loss);
    }
    Ok(losses)
}

fn check_inputs(state: &WinState, inputs: &[Sampler]) -> Result<()> {
    if inputs.len() != state.pairs.len() {
        return Err(Error::validation(format!(
            "{} inputs for {} solver pairs",
            inputs.len(),
            state.pairs.len()
        )));
    }
    let d = state.dim();
    if let Some(s) = inputs.iter().find(|s| s.dim() != d) {
        return Err(Error::validation(format!(
            "input of dimension {} for a {d}-dimensional barycenter",
            s.dim()
        )));
    }
    Ok(())
}

/// One application of the approximate fixed-point operator.
pub fn run_outer_iteration(
    state: &mut WinState,
    inputs: &[Sampler],
    cfg: &WinConfig,
    rngs: &mut WinRngs,
    probe: Option<&MomentProbe>,
) -> Result<OuterDiagnostics> {
    check_inputs(state, inputs)?;
    if rngs.solvers.len() != inputs.len() {
        return Err(Error::validation("one solver stream per input is required"));
    }
    if cfg.reset_solver_optimizers {
        state.pairs.iter_mut().for_each(MmrPair::reset_optimizers);
    }
    let solver_traces = update_solvers(state, inputs, &cfg.mmr(), rngs, cfg.parallel_solvers)?;
    let snapshot = state.generator.clone();
    let loss_g = regress_generator(state, &snapshot, cfg.k_g, cfg.batch_size, &cfg.lr_g, &mut rngs.generator)?;
    state.outer_iteration += 1;

    let (proxy_objective, uvp) = match probe {
        Some(p) => {
            let g = p.generated_moments(&state.generator)?;
            let proxy = p.proxy_objective(&g, &state.weights)?;
            let uvp = p.truth.as_ref().map(|t| bw2_uvp(&g, t)).transpose()?;
            (Some(proxy), uvp)
        }
        None => (None, None),
    };
    Ok(OuterDiagnostics {
        outer_iteration: state.outer_iteration,
        solver_traces,
        loss_g,
        proxy_objective,
        uvp,
    })
}

/// One row of the metrics timeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub outer_iter: usize,
    pub proxy_objective: f64,
    pub uvp_vs_truth: Option<f64>,
    pub loss_g_mean: f64,
}

/// Trained state plus its metrics timeline.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: WinState,
    pub timeline: Vec<IterationMetrics>,
    /// Moments of the generated measure after the final iteration.
    pub final_moments: GaussianMeasure,
}

impl TrainOutcome {
    pub fn final_uvp(&self) -> Option<f64> {
        self.timeline.last().and_then(|m| m.uvp_vs_truth)
    }
}

/// Runs `total_outer_iterations` outer loops from a fresh initialization.
/// With a `truth`, the timeline also tracks BW²-UVP against it.
pub fn train(
    inputs: &[Sampler],
    weights: &[f64],
    cfg: &WinConfig,
    seed: u64,
    truth: Option<&GaussianMeasure>,
) -> Result<TrainOutcome> {
    train_with(inputs, weights, cfg, seed, truth, |_| {})
}

/// [`train`] with a callback after every outer iteration.
pub fn train_with(
    inputs: &[Sampler],
    weights: &[f64],
    cfg: &WinConfig,
    seed: u64,
    truth: Option<&GaussianMeasure>,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    validate_weights(weights)?;
    if inputs.is_empty() || inputs.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} inputs for {} weights",
            inputs.len(),
            weights.len()
        )));
    }
    let d = inputs[0].dim();
    if let Some(t) = truth {
        if t.dim() != d {
            return Err(Error::validation("reference barycenter dimension differs from the inputs"));
        }
    }
    let mut state = WinState::init(d, weights, cfg, seed)?;
    check_inputs(&state, inputs)?;
    let mut rngs = WinRngs::new(seed, inputs.len());
    let probe = MomentProbe::new(&state.latent, inputs, cfg, seed, truth.cloned())?;

    if cfg.warmup_k_v > 0 {
        let warm = MmrConfig {
            k_v: cfg.warmup_k_v,
            ..cfg.mmr()
        };
        update_solvers(&mut state, inputs, &warm, &mut rngs, cfg.parallel_solvers)?;
    }

    let mut timeline = Vec::with_capacity(cfg.total_outer_iterations);
    for _ in 0..cfg.total_outer_iterations {
        let diag = run_outer_iteration(&mut state, inputs, cfg, &mut rngs, Some(&probe))?;
        let m = IterationMetrics {
            outer_iter: diag.outer_iteration,
            proxy_objective: diag.proxy_objective.expect("probe supplied"),
            uvp_vs_truth: diag.uvp,
            loss_g_mean: diag.loss_g_mean(),
        };
        on_iteration(&m);
        timeline.push(m);
    }
    let final_moments = probe.generated_moments(&state.generator)?;
    Ok(TrainOutcome {
        state,
        timeline,
        final_moments,
    })
}

/// CSV `outer_iter,proxy_objective,uvp_vs_truth,loss_G_mean` behind a versioned comment line.
pub fn write_metrics_csv<W: Write>(timeline: &[IterationMetrics], mut w: W) -> Result<()> {
    writeln!(w, "# barywin-metrics v1")?;
    writeln!(w, "outer_iter,proxy_objective,uvp_vs_truth,loss_G_mean")?;
    for m in timeline {
        let uvp = m.uvp_vs_truth.map_or_else(String::new, |u| format!("{u:e}"));
        writeln!(w, "{},{:e},{},{:e}", m.outer_iter, m.proxy_objective, uvp, m.loss_g_mean)?;
    }
    Ok(())
}

/// Indices `k` where `timeline[k].proxy_objective` exceeds the previous value by more than
/// `jitter` (relative).
pub fn descent_violations(timeline: &[IterationMetrics], jitter: f64) -> Vec<usize> {
    timeline
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].proxy_objective > w[0].proxy_objective * (1.0 + jitter))
        .map(|(k, _)| k + 1)
        .collect()
}

/// Generator and per-measure gradients for the regression/variational comparison.
#[derive(Debug, Clone)]
pub struct GradientComparison {
    pub regression_grad: Vec<f64>,
    pub variational_grad: Vec<f64>,
    pub relative_difference: f64,
}

/// Compares, at `ξ = ξ₀` and on one latent batch, the gradient of the
/// regression loss `½ mean‖G(z) − Σ αₙ Tₙ(G₀(z))‖²` with the weighted sum of
/// per-measure gradients `mean J_ξG(z)ᵀ (G(z) − Tₙ(G(z)))` of the
/// transport costs, given exact maps `Tₙ`.
pub fn lemma1_gradient_check(
    generator: &Mlp,
    exact_maps: &[AffineMap],
    weights: &[f64],
    z: &ArrayView2<f64>,
) -> Result<GradientComparison> {
    if exact_maps.len() != weights.len() {
        return Err(Error::validation("one exact map per weight is required"));
    }
    let d = generator.output_dim();
    if let Some(m) = exact_maps.iter().find(|m| m.input_dim() != d || m.output_dim() != d) {
        return Err(Error::validation(format!(
            "exact map of shape {}→{} for a {d}-dimensional generator",
            m.input_dim(),
            m.output_dim()
        )));
    }
    if z.ncols() != generator.input_dim() {
        return Err(Error::validation("latent batch does not match the generator input"));
    }
    let snapshot = generator.clone();
    let maps: Vec<&dyn PointMap> = exact_maps.iter().map(|m| m as &dyn PointMap).collect();
    let target = regression_target(&snapshot, &maps, weights, z)?;
    let (_, regression_grad) = regression_loss_grad(generator, z, &target.view())?;

    let b = z.nrows() as f64;
    let tape = generator.forward_tape(z)?;
    let x = tape.output();
    let mut variational_grad = vec![0.0; generator.num_params()];
    for (map, &a) in exact_maps.iter().zip(weights) {
        let potential_grad = x - &map.apply(&x.view())?;
        let g = generator.param_grad_tape(&tape, &(potential_grad / b).view())?;
        variational_grad.iter_mut().zip(g).for_each(|(acc, gi)| *acc += a * gi);
    }
    let diff: f64 = regression_grad
        .iter()
        .zip(&variational_grad)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = regression_grad.iter().map(|a| a * a).sum::<f64>().sqrt();
    let relative_difference = if norm == 0.0 { diff } else { diff / norm };
    Ok(GradientComparison {
        regression_grad,
        variational_grad,
        relative_difference,
    })
}

/// Inputs translated onto a common mean, and the constant predictor at that mean.
#[derive(Debug, Clone)]
pub struct ConstantShiftBaseline {
    pub mean_estimate: DVector<f64>,
    pub input_means: Vec<DVector<f64>>,
    pub shifted: Vec<Sampler>,
}

impl ConstantShiftBaseline {
    /// BW²-UVP of the point mass at the estimated barycenter mean.
    pub fn uvp(&self, truth: &GaussianMeasure) -> Result<f64> {
        bw2_uvp(&GaussianMeasure::point_mass(self.mean_estimate.clone()), truth)
    }

    pub fn shifts(&self) -> Vec<DVector<f64>> {
        self.input_means.iter().map(|m| &self.mean_estimate - m).collect()
    }
}

/// Estimates `μ̄ = Σ αₙ μₙ` from `n_samples` draws per input and shifts
/// every input by `μ̄ − μₙ`.
pub fn constant_shift_baseline(
    inputs: &[Sampler],
    weights: &[f64],
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<ConstantShiftBaseline> {
    validate_weights(weights)?;
    if inputs.len() != weights.len() {
        return Err(Error::validation("one weight per input is required"));
    }
    if n_samples == 0 {
        return Err(Error::validation("need at least one sample per input"));
    }
    let d = inputs[0].dim();
    let mut input_means = Vec::with_capacity(inputs.len());
    for s in inputs {
        if s.dim() != d {
            return Err(Error::validation("inputs have different dimensions"));
        }
        let x = s.sample(rng, n_samples)?;
        let m = x.mean_axis(Axis(0)).expect("non-empty");
        input_means.push(DVector::from_iterator(d, m.iter().copied()));
    }
    let mean_estimate = input_means
        .iter()
        .zip(weights)
        .fold(DVector::zeros(d), |acc, (m, &a)| acc + m * a);
    let shifted = inputs
        .iter()
        .zip(&input_means)
        .map(|(s, m)| pushforward(s, Arc::new(AffineMap::translation(&mean_estimate - m))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ConstantShiftBaseline {
        mean_estimate,
        input_means,
        shifted,
    })
}

/// Zero covariance helper for point predictors.
pub fn point_prediction(mean: DVector<f64>) -> GaussianMeasure {
    let d = mean.len();
    GaussianMeasure {
        mean,
        cov: SpdMatrix::zeros(d),
    }
}
