//! Fully-connected ReLU networks, reverse-mode gradients and Adam.
//!
//! Parameters live in one flat buffer, layer by layer: the weight matrix in
//! row-major `fan_out × fan_in` order followed by the bias vector. The same
//! order is used by the optimizer state and by the checkpoint format, so a
//! checkpoint is the buffer itself behind a short header.

use std::io::{Read, Write};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are samples.
pub type Batch = Array2<f64>;

/// Feed-forward network: ReLU on hidden layers, identity on the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_tape`]: `acts[0]` is the input,
/// `acts[l]` the (post-ReLU) input of layer `l`, and the last entry the output.
#[derive(Debug, Clone)]
pub struct Tape {
    acts: Vec<Batch>,
}

impl Tape {
    pub fn output(&self) -> &Batch {
        self.acts.last().expect("tape holds at least the input")
    }

    pub fn input(&self) -> &Batch {
        &self.acts[0]
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Batch,
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::validation(format!(
            "a network needs at least an input and an output size, got {sizes:?}"
        )));
    }
    if sizes.contains(&0) {
        return Err(Error::validation(format!("layer sizes must be positive, got {sizes:?}")));
    }
    Ok(())
}

/// Hidden widths used for every network in the location-scatter experiments.
pub fn default_hidden(dim: usize) -> Vec<usize> {
    let w = (2 * dim).max(100);
    vec![w, w, w]
}

/// `[input, hidden..., output]`
pub fn layer_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; param_count(sizes)],
        })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        check_sizes(sizes)?;
        let want = param_count(sizes);
        if params.len() != want {
            return Err(Error::validation(format!(
                "parameter vector has {} entries, layer sizes {sizes:?} need {want}",
                params.len()
            )));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params,
        })
    }

    /// He-scaled Gaussian weights (std `√(2/fan_in)`), zero biases.
    pub fn he_init_with<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Mlp::zeros(sizes)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + fan_in * fan_out] {
                let g: f64 = rng.sample(StandardNormal);
                *p = std * g;
            }
            off += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn he_init(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::he_init_with(sizes, &mut crate::rng::seeded(seed))
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn offset(&self, layer: usize) -> usize {
        self.sizes[..=layer]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// `(W, b)` of layer `l`, with `W` shaped `fan_out × fan_in`.
    pub fn layer(&self, l: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.offset(l);
        let w = ArrayView2::from_shape((fan_out, fan_in), &self.params[off..off + fan_in * fan_out])
            .expect("layout matches layer sizes");
        let b = ArrayView1::from(&self.params[off + fan_in * fan_out..off + (fan_in + 1) * fan_out]);
        (w, b)
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::validation(format!(
                "batch has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn apply_layer(&self, l: usize, h: &ArrayView2<f64>) -> Batch {
        let (w, b) = self.layer(l);
        let mut z = Array2::zeros((h.nrows(), w.nrows()));
        general_mat_mul(1.0, h, &w.t(), 0.0, &mut z);
        z += &b;
        if l + 1 < self.num_layers() {
            z.mapv_inplace(|v| v.max(0.0));
        }
        z
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Result<Batch> {
        self.check_input(x)?;
        let mut h = self.apply_layer(0, x);
        for l in 1..self.num_layers() {
            h = self.apply_layer(l, &h.view());
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &ArrayView2<f64>) -> Result<Tape> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_owned());
        for l in 0..self.num_layers() {
            let next = self.apply_layer(l, &acts[l].view());
            acts.push(next);
        }
        Ok(Tape { acts })
    }

    fn check_upstream(&self, tape: &Tape, upstream: &ArrayView2<f64>) -> Result<()> {
        let out = tape.output();
        if upstream.dim() != out.dim() || tape.acts.len() != self.sizes.len() {
            return Err(Error::validation(format!(
                "upstream gradient is {:?}, forward output was {:?}",
                upstream.dim(),
                out.dim()
            )));
        }
        Ok(())
    }

    /// Reverse pass for `Σ_rows ⟨upstream_row, output_row⟩`.
    pub fn backward_tape(&self, tape: &Tape, upstream: &ArrayView2<f64>) -> Result<Gradients> {
        self.check_upstream(tape, upstream)?;
        let mut grads = vec![0.0; self.params.len()];
        let input = self.reverse(tape, upstream, Some(&mut grads), true);
        Ok(Gradients {
            params: grads,
            input: input.expect("input gradient requested"),
        })
    }

    /// Parameter gradient only; skips the last input product.
    pub fn param_grad_tape(&self, tape: &Tape, upstream: &ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_upstream(tape, upstream)?;
        let mut grads = vec![0.0; self.params.len()];
        self.reverse(tape, upstream, Some(&mut grads), false);
        Ok(grads)
    }

    /// Input gradient only; no parameter gradient is formed.
    pub fn input_grad_tape(&self, tape: &Tape, upstream: &ArrayView2<f64>) -> Result<Batch> {
        self.check_upstream(tape, upstream)?;
        Ok(self.reverse(tape, upstream, None, true).expect("input gradient requested"))
    }

    /// Forward then backward on `batch`.
    pub fn backward(&self, batch: &ArrayView2<f64>, upstream: &ArrayView2<f64>) -> Result<Gradients> {
        let tape = self.forward_tape(batch)?;
        self.backward_tape(&tape, upstream)
    }

    fn reverse(
        &self,
        tape: &Tape,
        upstream: &ArrayView2<f64>,
        mut grads: Option<&mut Vec<f64>>,
        want_input: bool,
    ) -> Option<Batch> {
        let mut delta = upstream.to_owned();
        for l in (0..self.num_layers()).rev() {
            let a_in = &tape.acts[l];
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if let Some(g) = grads.as_deref_mut() {
                let off = self.offset(l);
                let (gw, gb) = g[off..off + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
                let mut gw = ArrayViewMut2::from_shape((fan_out, fan_in), gw).expect("layout");
                general_mat_mul(1.0, &delta.t(), a_in, 0.0, &mut gw);
                for (dst, s) in gb.iter_mut().zip(delta.sum_axis(Axis(0))) {
                    *dst = s;
                }
            }
            if l == 0 && !want_input {
                return None;
            }
            let (w, _) = self.layer(l);
            let mut prev = Array2::zeros((delta.nrows(), fan_in));
            general_mat_mul(1.0, &delta, &w, 0.0, &mut prev);
            if l > 0 {
                ndarray::Zip::from(&mut prev)
                    .and(a_in)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            delta = prev;
        }
        Some(delta)
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&ACTIVATION_RELU_IDENTITY.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u64).to_le_bytes())?;
        }
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let act = read_u32(&mut r)?;
        if act != ACTIVATION_RELU_IDENTITY {
            return Err(Error::Format(format!("unknown activation tag {act}")));
        }
        let n = read_u32(&mut r)? as usize;
        if !(2..=1024).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            sizes.push(usize::try_from(u64::from_le_bytes(b)).map_err(|e| Error::Format(e.to_string()))?);
        }
        check_sizes(&sizes).map_err(|e| Error::Format(e.to_string()))?;
        let count = param_count(&sizes);
        let mut params = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut b)?;
            params.push(f64::from_le_bytes(b));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", rest.len())));
        }
        Mlp::from_params(&sizes, params)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BARYMLP\0";
pub const CHECKPOINT_VERSION: u32 = 1;
/// ReLU on hidden layers, identity on the output.
pub const ACTIVATION_RELU_IDENTITY: u32 = 1;

/// Step decay: `initial_lr · decay_factor^⌊k / decay_every⌋` at optimizer step `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, decay_every: u64, decay_factor: f64) -> Result<Self> {
        let s = LrSchedule {
            initial_lr,
            decay_every,
            decay_factor,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            initial_lr: lr,
            decay_every: u64::MAX,
            decay_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::validation(format!("learning rate must be positive, got {}", self.initial_lr)));
        }
        if self.decay_every == 0 {
            return Err(Error::validation("decay_every must be positive"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::validation(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let k = (step / self.decay_every).min(i32::MAX as u64) as i32;
        self.initial_lr * self.decay_factor.powi(k)
    }
}

/// Adam moments for one parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl AdamState {
    /// Default betas (0.9, 0.999) and ε = 1e-8.
    pub fn new(num_params: usize) -> Self {
        Self::with_betas(num_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(num_params: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn reset(&mut self) {
        self.first_moment.iter_mut().for_each(|m| *m = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
        self.step_count = 0;
    }

    /// One bias-corrected Adam update. Returns the learning rate used.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], schedule: &LrSchedule) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::validation(format!(
                "adam: {} params, {} grads, state sized for {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradient".into(),
                index: i,
            });
        }
        let lr = schedule.lr_at(self.step_count);
        self.step_count += 1;
        let t = self.step_count.min(i32::MAX as u64) as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(lr)
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], schedule: &LrSchedule) -> Result<f64> {
    state.step(params, grads, schedule)
}
