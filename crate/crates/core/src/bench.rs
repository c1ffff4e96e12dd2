//! Location-scatter benchmark: trained barycenter and constant-shift baseline
//! scored against the exact answer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gaussian_ref::{location_scatter_truth, GaussianMeasure};
use crate::measures::{make_scatter_population, BaseKind, LocationScatterSpec};
use crate::rng;
use crate::win::{constant_shift_baseline, train_with, IterationMetrics, TrainOutcome, WinConfig};

/// Weights of the four-member benchmark population.
pub const BENCHMARK_WEIGHTS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];

/// Samples per input for the baseline mean estimate.
pub const BASELINE_SAMPLES: usize = 100_000;

/// The benchmark population for `dim` with the standard weights.
pub fn benchmark_population(dim: usize, base: BaseKind, seed: u64) -> Result<LocationScatterSpec> {
    make_scatter_population(dim, BENCHMARK_WEIGHTS.len(), seed)?
        .with_weights(&BENCHMARK_WEIGHTS)
        .map(|s| s.with_base(base))
}

/// Final scores of one benchmark run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub dim: usize,
    pub base: BaseKind,
    pub seed: u64,
    pub uvp: f64,
    pub baseline_uvp: f64,
    pub outer_iterations: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: BenchmarkReport,
    pub spec: LocationScatterSpec,
    pub truth: GaussianMeasure,
    pub outcome: TrainOutcome,
}

impl BenchmarkRun {
    pub fn timeline(&self) -> &[IterationMetrics] {
        &self.outcome.timeline
    }
}

/// UVP of the constant-shift baseline on a population.
pub fn baseline_uvp(spec: &LocationScatterSpec, truth: &GaussianMeasure, seed: u64) -> Result<f64> {
    let inputs = spec.samplers()?;
    let cs = constant_shift_baseline(&inputs, &spec.weights, BASELINE_SAMPLES, &mut rng::stream(seed, rng::BASELINE, 0))?;
    cs.uvp(truth)
}

/// Trains on the benchmark population and scores both methods.
pub fn run_scatter_benchmark(
    spec: &LocationScatterSpec,
    cfg: &WinConfig,
    seed: u64,
    on_iteration: impl FnMut(&IterationMetrics),
) -> Result<BenchmarkRun> {
    spec.validate()?;
    let truth = location_scatter_truth(spec)?;
    let inputs = spec.samplers()?;
    let start = Instant::now();
    let outcome = train_with(&inputs, &spec.weights, cfg, seed, Some(&truth), on_iteration)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let report = BenchmarkReport {
        dim: spec.dim(),
        base: spec.base,
        seed,
        uvp: outcome.final_uvp().unwrap_or(f64::NAN),
        baseline_uvp: baseline_uvp(spec, &truth, seed)?,
        outer_iterations: outcome.timeline.len(),
        wall_seconds,
    };
    Ok(BenchmarkRun {
        report,
        spec: spec.clone(),
        truth,
        outcome,
    })
}
