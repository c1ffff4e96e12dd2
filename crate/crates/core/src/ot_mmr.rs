//! Reversed maximin OT solver.
//!
//! A map network `T` and a potential network `v` play
//! `max_v min_T ∫[½‖x − T(x)‖² − v(T(x))] dP(x) + ∫ v dQ`. Both take descent
//! steps: `v` on `L_v = mean v(T(x)) − mean v(y)`, `T` on
//! `L_T = mean[½‖x − T(x)‖² − v(T(x))]`, with `K_T` map steps nested inside
//! every potential step. Fresh batches are drawn for every gradient step.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measures::{PointMap, Sampler};
use crate::nn::{default_hidden, layer_sizes, AdamState, Batch, LrSchedule, Mlp};
use crate::rng;

/// Loop sizes and learning-rate schedules for one solver pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmrConfig {
    pub k_v: usize,
    pub k_t: usize,
    pub batch_size: usize,
    pub lr_v: LrSchedule,
    pub lr_t: LrSchedule,
}

impl MmrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_v == 0 || self.k_t == 0 || self.batch_size == 0 {
            return Err(Error::validation(format!(
                "k_v, k_t and batch_size must be positive (got {}, {}, {})",
                self.k_v, self.k_t, self.batch_size
            )));
        }
        self.lr_v.validate()?;
        self.lr_t.validate()
    }
}

impl Default for MmrConfig {
    fn default() -> Self {
        MmrConfig {
            k_v: 50,
            k_t: 10,
            batch_size: 1024,
            lr_v: LrSchedule::new(1e-3, 10_000, 0.5).expect("valid"),
            lr_t: LrSchedule::new(1e-3, 10_000, 0.5).expect("valid"),
        }
    }
}

/// Map network `T: ℝᴰ → ℝᴰ`, potential `v: ℝᴰ → ℝ` and their optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct MmrPair {
    pub map: Mlp,
    pub potential: Mlp,
    pub map_opt: AdamState,
    pub potential_opt: AdamState,
}

impl MmrPair {
    pub fn new(map: Mlp, potential: Mlp) -> Result<Self> {
        let d = map.input_dim();
        if map.output_dim() != d || potential.input_dim() != d || potential.output_dim() != 1 {
            return Err(Error::validation(format!(
                "solver pair needs T: ℝ{d} → ℝ{d} and v: ℝ{d} → ℝ, got T: {:?}, v: {:?}",
                map.layer_sizes(),
                potential.layer_sizes()
            )));
        }
        let map_opt = AdamState::new(map.num_params());
        let potential_opt = AdamState::new(potential.num_params());
        Ok(MmrPair {
            map,
            potential,
            map_opt,
            potential_opt,
        })
    }

    /// He-initialized pair with the given hidden widths.
    pub fn init(dim: usize, hidden: &[usize], seed: u64, index: u32) -> Result<Self> {
        let map = Mlp::he_init_with(&layer_sizes(dim, hidden, dim), &mut rng::stream(seed, rng::INIT, 2 * index + 1))?;
        let potential = Mlp::he_init_with(&layer_sizes(dim, hidden, 1), &mut rng::stream(seed, rng::INIT, 2 * index + 2))?;
        MmrPair::new(map, potential)
    }

    /// Pair with `max(100, 2D)` hidden widths.
    pub fn init_default(dim: usize, seed: u64, index: u32) -> Result<Self> {
        Self::init(dim, &default_hidden(dim), seed, index)
    }

    pub fn dim(&self) -> usize {
        self.map.input_dim()
    }

    pub fn reset_optimizers(&mut self) {
        self.map_opt.reset();
        self.potential_opt.reset();
    }

    /// `L_v` and its parameter gradient on `(x, y)`.
    pub fn potential_loss_grad(&self, x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        let tx = self.map.forward(x)?;
        let tape_x = self.potential.forward_tape(&tx.view())?;
        let tape_y = self.potential.forward_tape(y)?;
        let (bx, by) = (x.nrows() as f64, y.nrows() as f64);
        let loss = tape_x.output().sum() / bx - tape_y.output().sum() / by;
        let mut g = self
            .potential
            .param_grad_tape(&tape_x, &Array2::from_elem((x.nrows(), 1), 1.0 / bx).view())?;
        let gy = self
            .potential
            .param_grad_tape(&tape_y, &Array2::from_elem((y.nrows(), 1), -1.0 / by).view())?;
        g.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
        Ok((loss, g))
    }

    /// `L_T` and its parameter gradient on `x`.
    pub fn map_loss_grad(&self, x: &ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        let b = x.nrows() as f64;
        let tape_t = self.map.forward_tape(x)?;
        let tx = tape_t.output();
        let tape_v = self.potential.forward_tape(&tx.view())?;
        let diff = tx - x;
        let loss = (0.5 * diff.mapv(|v| v * v).sum() - tape_v.output().sum()) / b;
        let dv = self
            .potential
            .input_grad_tape(&tape_v, &Array2::from_elem((x.nrows(), 1), -1.0 / b).view())?;
        let upstream = diff / b + dv;
        let g = self.map.param_grad_tape(&tape_t, &upstream.view())?;
        Ok((loss, g))
    }
}

/// One potential step and the mean of its nested map losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss_v: f64,
    pub loss_t: f64,
    pub lr_v: f64,
    pub lr_t: f64,
}

fn finite(loss: f64, phase: &str, step: u64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::numerical(phase, step as usize, format!("loss is {loss}")))
    }
}

/// `K_v` potential steps, each followed by `K_T` map steps, on fresh batches
/// from `source` (pushed by `T`) and `target`.
pub fn mmr_update(
    pair: &mut MmrPair,
    source: &Sampler,
    target: &Sampler,
    cfg: &MmrConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let d = pair.dim();
    if source.dim() != d || target.dim() != d {
        return Err(Error::validation(format!(
            "solver dimension {d}, source {}, target {}",
            source.dim(),
            target.dim()
        )));
    }
    let mut trace = Vec::with_capacity(cfg.k_v);
    for _ in 0..cfg.k_v {
        let step = pair.potential_opt.step_count();
        let x = source.sample(rng, cfg.batch_size)?;
        let y = target.sample(rng, cfg.batch_size)?;
        let (loss_v, g) = pair.potential_loss_grad(&x.view(), &y.view())?;
        finite(loss_v, "potential", step)?;
        let lr_v = pair
            .potential_opt
            .step(pair.potential.params_mut(), &g, &cfg.lr_v)
            .map_err(|e| Error::numerical("potential", step as usize, e.to_string()))?;

        let mut loss_t_sum = 0.0;
        let mut lr_t = 0.0;
        for _ in 0..cfg.k_t {
            let tstep = pair.map_opt.step_count();
            let x = source.sample(rng, cfg.batch_size)?;
            let (loss_t, g) = pair.map_loss_grad(&x.view())?;
            loss_t_sum += finite(loss_t, "map", tstep)?;
            lr_t = pair
                .map_opt
                .step(pair.map.params_mut(), &g, &cfg.lr_t)
                .map_err(|e| Error::numerical("map", tstep as usize, e.to_string()))?;
        }
        trace.push(LossRecord {
            step,
            loss_v,
            loss_t: loss_t_sum / cfg.k_t as f64,
            lr_v,
            lr_t,
        });
    }
    Ok(trace)
}

/// Monte-Carlo `mean ½‖x − T(x)‖²` over `n_samples` source draws.
pub fn transport_cost_estimate(
    map: &dyn PointMap,
    source: &Sampler,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::validation("need at least one sample"));
    }
    let x = source.sample(rng, n_samples)?;
    Ok(transport_cost_on(map, &x.view())?)
}

/// `mean ½‖x − T(x)‖²` on a given batch.
pub fn transport_cost_on(map: &dyn PointMap, x: &ArrayView2<f64>) -> Result<f64> {
    let tx = map.apply(x)?;
    let sq = (&tx - x).mapv(|v| v * v).sum_axis(Axis(1));
    Ok(0.5 * sq.mean().unwrap_or(0.0))
}

/// `mean ‖T(x) − T*(x)‖² / scale` on a batch; with `scale = tr Σ_target`
/// this is the normalized map error.
pub fn map_error_on(map: &dyn PointMap, reference: &dyn PointMap, x: &ArrayView2<f64>, scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::validation(format!("error scale must be positive, got {scale}")));
    }
    let diff = map.apply(x)? - reference.apply(x)?;
    Ok(diff.mapv(|v| v * v).sum() / x.nrows() as f64 / scale)
}

/// `mean ‖T(x) − x‖²` on a batch.
pub fn mean_sq_displacement(map: &dyn PointMap, x: &ArrayView2<f64>) -> Result<f64> {
    Ok(2.0 * transport_cost_on(map, x)?)
}

/// Dual estimate `mean_x[½‖x − T(x)‖² − v(T(x))] + mean_y v(y)` of the transport cost.
pub fn dual_estimate(
    pair: &MmrPair,
    source: &Sampler,
    target: &Sampler,
    n_samples: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    let x = source.sample(rng, n_samples)?;
    let y = target.sample(rng, n_samples)?;
    let tx = pair.map.forward(&x.view())?;
    let cost = 0.5 * (&tx - &x).mapv(|v| v * v).sum() / n_samples as f64;
    let vt = pair.potential.forward(&tx.view())?.mean().unwrap_or(0.0);
    let vy = pair.potential.forward(&y.view())?.mean().unwrap_or(0.0);
    Ok(cost - vt + vy)
}

/// Settings for fitting maps from each input measure onto a trained generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverseMapConfig {
    /// Potential updates per pair; each is followed by `mmr.k_t` map updates.
    pub total_iters: usize,
    pub mmr: MmrConfig,
    pub hidden: Option<Vec<usize>>,
}

/// One inverse map per input, trained with `source = Pₙ` and `target = G♯S`.
#[derive(Debug, Clone)]
pub struct InverseMaps {
    pub pairs: Vec<MmrPair>,
    pub traces: Vec<Vec<LossRecord>>,
}

pub fn fit_inverse_maps(
    generator: &Mlp,
    latent: &Sampler,
    inputs: &[Sampler],
    cfg: &InverseMapConfig,
    seed: u64,
) -> Result<InverseMaps> {
    if latent.dim() != generator.input_dim() {
        return Err(Error::validation("latent dimension does not match the generator input"));
    }
    let d = generator.output_dim();
    let generated = crate::measures::pushforward(latent, std::sync::Arc::new(generator.clone()))?;
    let hidden = cfg.hidden.clone().unwrap_or_else(|| default_hidden(d));
    let mmr = MmrConfig {
        k_v: cfg.total_iters,
        ..cfg.mmr
    };
    let mut pairs = Vec::with_capacity(inputs.len());
    let mut traces = Vec::with_capacity(inputs.len());
    for (n, input) in inputs.iter().enumerate() {
        let mut pair = MmrPair::init(d, &hidden, seed, 1000 + n as u32)?;
        let mut r = rng::stream(seed, rng::SOLVER, 1000 + n as u32);
        traces.push(mmr_update(&mut pair, input, &generated, &mmr, &mut r)?);
        pairs.push(pair);
    }
    Ok(InverseMaps { pairs, traces })
}

/// CSV `step,loss_v,loss_T,lr_v,lr_T` behind a versioned comment line.
pub fn write_loss_csv<W: Write>(trace: &[LossRecord], mut w: W) -> Result<()> {
    writeln!(w, "# barywin-loss-trace v1")?;
    writeln!(w, "step,loss_v,loss_T,lr_v,lr_T")?;
    for r in trace {
        writeln!(w, "{},{:e},{:e},{:e},{:e}", r.step, r.loss_v, r.loss_t, r.lr_v, r.lr_t)?;
    }
    Ok(())
}

/// Evaluates the map network on a batch.
pub fn apply_map(pair: &MmrPair, x: &ArrayView2<f64>) -> Result<Batch> {
    pair.map.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{base_sampler, BaseKind};

    #[test]
    fn pair_shapes_are_checked() {
        let t = Mlp::he_init(&[2, 8, 2], 0).unwrap();
        let v = Mlp::he_init(&[2, 8, 2], 1).unwrap();
        assert!(MmrPair::new(t, v).is_err());
    }

    #[test]
    fn potential_shift_leaves_map_gradient_unchanged() {
        let mut pair = MmrPair::init(3, &[16, 16], 4, 0).unwrap();
        let x = base_sampler(BaseKind::Gaussian, 3).unwrap().sample_seeded(1, 64).unwrap();
        let y = base_sampler(BaseKind::Gaussian, 3).unwrap().sample_seeded(2, 64).unwrap();
        let (lt0, gt0) = pair.map_loss_grad(&x.view()).unwrap();
        let (lv0, gv0) = pair.potential_loss_grad(&x.view(), &y.view()).unwrap();
        // Output bias of v is the last parameter.
        let last = pair.potential.num_params() - 1;
        pair.potential.params_mut()[last] += 3.25;
        let (lt1, gt1) = pair.map_loss_grad(&x.view()).unwrap();
        let (lv1, gv1) = pair.potential_loss_grad(&x.view(), &y.view()).unwrap();
        assert_eq!(gt0, gt1);
        assert!((lt1 - (lt0 - 3.25)).abs() < 1e-12);
        assert!((lv1 - lv0).abs() < 1e-12);
        assert!(gv0.iter().zip(&gv1).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn identity_cost_is_zero() {
        let s = base_sampler(BaseKind::Uniform, 4).unwrap();
        let id = crate::measures::AffineMap::identity(4);
        assert_eq!(transport_cost_estimate(&id, &s, 100, &mut rng::seeded(0)).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = MmrConfig::default();
        c.validate().unwrap();
        c.k_t = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_csv_layout() {
        let rec = LossRecord {
            step: 0,
            loss_v: 1.0,
            loss_t: 2.0,
            lr_v: 1e-3,
            lr_t: 1e-3,
        };
        let mut out = Vec::new();
        write_loss_csv(&[rec], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "step,loss_v,loss_T,lr_v,lr_T");
        assert_eq!(lines.len(), 3);
    }
}
