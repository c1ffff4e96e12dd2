//! Probability measures accessible by samples.
//!
//! A [`Sampler`] is an immutable description; randomness comes from the
//! generator passed to [`Sampler::sample`]. Pushforwards compose samplers
//! with any [`PointMap`] (affine maps, networks, congruent gradient maps).

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdMatrix};
use crate::nn::{Batch, Mlp};
use crate::rng;

/// Structured provenance of a sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: String,
    pub params: Value,
}

impl Descriptor {
    pub fn new(kind: impl Into<String>, params: Value) -> Self {
        Descriptor {
            kind: kind.into(),
            params,
        }
    }
}

/// A measure that can be sampled.
pub trait Measure: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// `n` i.i.d. draws as the rows of a batch.
    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Batch>;
    fn descriptor(&self) -> Descriptor;
}

/// A map applied row-wise to batches of points.
pub trait PointMap: Send + Sync + fmt::Debug {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, x: &ArrayView2<f64>) -> Result<Batch>;
    fn describe(&self) -> Value;
}

/// Shared handle to a [`Measure`].
#[derive(Clone, Debug)]
pub struct Sampler(Arc<dyn Measure>);

impl Sampler {
    pub fn new<M: Measure + 'static>(m: M) -> Self {
        Sampler(Arc::new(m))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Batch> {
        self.0.sample(rng, n)
    }

    /// Sample from a fresh generator seeded with `seed`.
    pub fn sample_seeded(&self, seed: u64, n: usize) -> Result<Batch> {
        self.sample(&mut rng::seeded(seed), n)
    }

    pub fn descriptor(&self) -> Descriptor {
        self.0.descriptor()
    }

    /// Point mass at `point`.
    pub fn constant(point: &[f64]) -> Result<Self> {
        if point.is_empty() {
            return Err(Error::validation("constant sampler needs a point of dimension ≥ 1"));
        }
        Ok(Sampler::new(Constant(point.to_vec())))
    }

    /// `N(mean, cov)` as an affine image of the standard Gaussian.
    pub fn gaussian(mean: &DVector<f64>, cov: &SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::validation("mean and covariance dimensions differ"));
        }
        let root = linalg::spd_sqrt(cov)?;
        pushforward(
            &base_sampler(BaseKind::Gaussian, mean.len())?,
            Arc::new(AffineMap::new(root.into_inner(), mean.clone())?),
        )
    }
}

#[derive(Debug)]
struct Constant(Vec<f64>);

impl Measure for Constant {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn sample(&self, _rng: &mut dyn RngCore, n: usize) -> Result<Batch> {
        let row = Array1::from(self.0.clone());
        Ok(row.broadcast((n, self.0.len())).expect("broadcast row").to_owned())
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor::new("constant", json!({ "point": self.0 }))
    }
}

/// Standardized base distributions (zero mean, identity covariance).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Gaussian,
    /// Uniform on `[−√3, √3]^D`.
    Uniform,
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(BaseKind::Gaussian),
            "uniform" => Ok(BaseKind::Uniform),
            other => Err(Error::validation(format!(
                "unknown base distribution {other:?} (expected \"gaussian\" or \"uniform\")"
            ))),
        }
    }
}

impl fmt::Display for BaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKind::Gaussian => "gaussian",
            BaseKind::Uniform => "uniform",
        })
    }
}

#[derive(Debug)]
struct Base {
    kind: BaseKind,
    dim: usize,
}

impl Measure for Base {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Batch> {
        let half = 3f64.sqrt();
        Ok(match self.kind {
            BaseKind::Gaussian => Array2::from_shape_simple_fn((n, self.dim), || rng.sample(StandardNormal)),
            BaseKind::Uniform => Array2::from_shape_simple_fn((n, self.dim), || rng.random_range(-half..half)),
        })
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor::new("base", json!({ "distribution": self.kind, "dim": self.dim }))
    }
}

pub fn base_sampler(kind: BaseKind, dim: usize) -> Result<Sampler> {
    if dim == 0 {
        return Err(Error::validation("base distribution dimension must be at least 1"));
    }
    Ok(Sampler::new(Base { kind, dim }))
}

/// `x ↦ A x + b`.
#[derive(Debug, Clone)]
pub struct AffineMap {
    matrix: DMatrix<f64>,
    shift: DVector<f64>,
    matrix_t: Array2<f64>,
}

impl AffineMap {
    pub fn new(matrix: DMatrix<f64>, shift: DVector<f64>) -> Result<Self> {
        if matrix.nrows() != shift.len() {
            return Err(Error::validation(format!(
                "affine map: {}x{} matrix with shift of length {}",
                matrix.nrows(),
                matrix.ncols(),
                shift.len()
            )));
        }
        let matrix_t = Array2::from_shape_fn((matrix.ncols(), matrix.nrows()), |(i, j)| matrix[(j, i)]);
        Ok(AffineMap {
            matrix,
            shift,
            matrix_t,
        })
    }

    pub fn identity(dim: usize) -> Self {
        AffineMap::new(DMatrix::identity(dim, dim), DVector::zeros(dim)).expect("square")
    }

    pub fn translation(shift: DVector<f64>) -> Self {
        let d = shift.len();
        AffineMap::new(DMatrix::identity(d, d), shift).expect("square")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn shift(&self) -> &DVector<f64> {
        &self.shift
    }

    /// `self ∘ inner`
    pub fn compose(&self, inner: &AffineMap) -> Result<AffineMap> {
        if self.matrix.ncols() != inner.matrix.nrows() {
            return Err(Error::validation("affine composition dimension mismatch"));
        }
        AffineMap::new(&self.matrix * &inner.matrix, &self.matrix * &inner.shift + &self.shift)
    }
}

impl PointMap for AffineMap {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Result<Batch> {
        if x.ncols() != self.input_dim() {
            return Err(Error::validation(format!(
                "affine map expects {} columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut y = x.dot(&self.matrix_t);
        let b = Array1::from_iter(self.shift.iter().copied());
        y += &b;
        Ok(y)
    }

    fn describe(&self) -> Value {
        json!({
            "affine": {
                "matrix": self.matrix.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>(),
                "shift": self.shift.iter().copied().collect::<Vec<_>>(),
            }
        })
    }
}

impl PointMap for Mlp {
    fn input_dim(&self) -> usize {
        Mlp::input_dim(self)
    }

    fn output_dim(&self) -> usize {
        Mlp::output_dim(self)
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Result<Batch> {
        self.forward(x)
    }

    fn describe(&self) -> Value {
        json!({ "mlp": { "layer_sizes": self.layer_sizes() } })
    }
}

type BatchFn = dyn Fn(&ArrayView2<f64>) -> Result<Batch> + Send + Sync;

/// ReLU network computing `x ↦ Ax + b` exactly: the first layer splits
/// `Ax` into `[Ax; −Ax]`, further hidden layers pass the non-negative
/// halves through, and the output recombines them. Hidden width is twice
/// the output dimension.
pub fn affine_as_relu_net(map: &AffineMap, n_hidden: usize) -> Result<Mlp> {
    if n_hidden == 0 {
        return Err(Error::validation("need at least one hidden layer"));
    }
    let (d_in, d_out) = (map.input_dim(), map.output_dim());
    let w = 2 * d_out;
    let mut sizes = vec![d_in];
    sizes.extend(std::iter::repeat_n(w, n_hidden));
    sizes.push(d_out);
    let mut params = Vec::new();
    let a = map.matrix();
    for i in 0..w {
        let sign = if i < d_out { 1.0 } else { -1.0 };
        params.extend((0..d_in).map(|j| sign * a[(i % d_out, j)]));
    }
    params.extend(std::iter::repeat_n(0.0, w));
    for _ in 1..n_hidden {
        params.extend((0..w * w).map(|k| if k / w == k % w { 1.0 } else { 0.0 }));
        params.extend(std::iter::repeat_n(0.0, w));
    }
    for i in 0..d_out {
        params.extend((0..w).map(|j| {
            if j == i {
                1.0
            } else if j == i + d_out {
                -1.0
            } else {
                0.0
            }
        }));
    }
    params.extend(map.shift().iter().copied());
    Mlp::from_params(&sizes, params)
}

/// A named closure acting on batches.
pub struct FnMap {
    name: String,
    input_dim: usize,
    output_dim: usize,
    f: Box<BatchFn>,
}

impl FnMap {
    pub fn new(
        name: impl Into<String>,
        input_dim: usize,
        output_dim: usize,
        f: impl Fn(&ArrayView2<f64>) -> Result<Batch> + Send + Sync + 'static,
    ) -> Self {
        FnMap {
            name: name.into(),
            input_dim,
            output_dim,
            f: Box::new(f),
        }
    }

    /// Applies `f` to every row independently.
    pub fn pointwise(
        name: impl Into<String>,
        input_dim: usize,
        output_dim: usize,
        f: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        FnMap::new(name, input_dim, output_dim, move |x| {
            let mut out = Array2::zeros((x.nrows(), output_dim));
            for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
                let v = f(&row.to_vec());
                if v.len() != output_dim {
                    return Err(Error::validation(format!(
                        "pointwise map returned {} values, declared {output_dim}",
                        v.len()
                    )));
                }
                dst.assign(&Array1::from(v));
            }
            Ok(out)
        })
    }
}

impl fmt::Debug for FnMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnMap")
            .field("name", &self.name)
            .field("input_dim", &self.input_dim)
            .field("output_dim", &self.output_dim)
            .finish()
    }
}

impl PointMap for FnMap {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Result<Batch> {
        (self.f)(x)
    }

    fn describe(&self) -> Value {
        json!({ "function": self.name })
    }
}

#[derive(Debug)]
struct Pushforward {
    base: Sampler,
    map: Arc<dyn PointMap>,
}

impl Measure for Pushforward {
    fn dim(&self) -> usize {
        self.map.output_dim()
    }

    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Batch> {
        let x = self.base.sample(rng, n)?;
        let y = self.map.apply(&x.view())?;
        if y.ncols() != self.map.output_dim() || y.nrows() != n {
            return Err(Error::validation(format!(
                "map produced a {}x{} batch, expected {}x{}",
                y.nrows(),
                y.ncols(),
                n,
                self.map.output_dim()
            )));
        }
        Ok(y)
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor::new(
            "pushforward",
            json!({ "base": self.base.descriptor(), "map": self.map.describe() }),
        )
    }
}

/// `map ♯ s`: draws from `s` and applies `map`.
pub fn pushforward(s: &Sampler, map: Arc<dyn PointMap>) -> Result<Sampler> {
    if map.input_dim() != s.dim() {
        return Err(Error::validation(format!(
            "map takes {}-dimensional input, sampler is {}-dimensional",
            map.input_dim(),
            s.dim()
        )));
    }
    Ok(Sampler::new(Pushforward { base: s.clone(), map }))
}

/// One member `f_{S,u} ♯ P₀` of a location-scatter family.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterMember {
    pub scatter: SpdMatrix,
    pub shift: DVector<f64>,
}

/// Location-scatter population over a standardized base.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationScatterSpec {
    pub base: BaseKind,
    pub members: Vec<ScatterMember>,
    pub weights: Vec<f64>,
}

/// Weights must be positive and sum to one within `1e-12`.
pub fn validate_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::validation("at least one weight is required"));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::validation(format!("weight α[{i}] = {w} must be positive")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::validation(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

impl LocationScatterSpec {
    pub fn dim(&self) -> usize {
        self.members.first().map_or(0, |m| m.shift.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() != self.weights.len() {
            return Err(Error::validation(format!(
                "{} members but {} weights",
                self.members.len(),
                self.weights.len()
            )));
        }
        validate_weights(&self.weights)?;
        let d = self.dim();
        for (n, m) in self.members.iter().enumerate() {
            if m.scatter.dim() != d || m.shift.len() != d {
                return Err(Error::validation(format!("member {n} has inconsistent dimension")));
            }
            SpdMatrix::new_definite(m.scatter.as_matrix().clone())
                .map_err(|e| Error::validation(format!("member {n} scatter: {e}")))?;
        }
        Ok(())
    }

    pub fn with_base(mut self, base: BaseKind) -> Self {
        self.base = base;
        self
    }

    pub fn with_weights(mut self, weights: &[f64]) -> Result<Self> {
        self.weights = weights.to_vec();
        self.validate()?;
        Ok(self)
    }

    pub fn with_shifts(mut self, shifts: &[DVector<f64>]) -> Result<Self> {
        if shifts.len() != self.members.len() {
            return Err(Error::validation("one shift per member is required"));
        }
        for (m, s) in self.members.iter_mut().zip(shifts) {
            m.shift = s.clone();
        }
        self.validate()?;
        Ok(self)
    }

    /// Covariance `S Sᵀ` of member `n` (base has identity covariance).
    pub fn member_covariance(&self, n: usize) -> SpdMatrix {
        let s = self.members[n].scatter.as_matrix();
        SpdMatrix::from_symmetric_unchecked(s * s.transpose())
    }

    pub fn samplers(&self) -> Result<Vec<Sampler>> {
        let base = base_sampler(self.base, self.dim())?;
        self.members
            .iter()
            .map(|m| {
                pushforward(
                    &base,
                    Arc::new(AffineMap::new(m.scatter.as_matrix().clone(), m.shift.clone())?),
                )
            })
            .collect()
    }
}

/// `Λ = diag(½·b^k)`, `b = 4^{1/(D−1)}`: geometric spectrum from ½ to 2.
pub fn scatter_spectrum(dim: usize) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(Error::validation("scatter populations need dimension ≥ 2"));
    }
    let b = 4f64.powf(1.0 / (dim - 1) as f64);
    Ok((0..dim)
        .map(|k| if k + 1 == dim { 2.0 } else { 0.5 * b.powi(k as i32) })
        .collect())
}

/// `n_members` scatter matrices `Rₙᵀ Λ Rₙ` with random rotations `Rₙ`, zero
/// shifts, Gaussian base and uniform weights.
pub fn make_scatter_population(dim: usize, n_members: usize, seed: u64) -> Result<LocationScatterSpec> {
    if n_members == 0 {
        return Err(Error::validation("a population needs at least one member"));
    }
    let lambda = DMatrix::from_diagonal(&DVector::from_vec(scatter_spectrum(dim)?));
    let members = (0..n_members)
        .map(|n| {
            let r = linalg::random_rotation(dim, &mut rng::stream(seed, rng::DATASET, n as u32))?;
            let s = r.transpose() * &lambda * &r;
            Ok(ScatterMember {
                scatter: SpdMatrix::new_definite(s)?,
                shift: DVector::zeros(dim),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LocationScatterSpec {
        base: BaseKind::Gaussian,
        members,
        weights: vec![1.0 / n_members as f64; n_members],
    })
}

/// Two-dimensional toy shapes, standardized to zero mean and identity covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toy2d {
    /// Uniform on a 2:1 axis-aligned rectangle.
    Rectangle,
    /// Two-turn spiral with radial noise 0.1.
    SwissRoll,
}

impl FromStr for Toy2d {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rectangle" => Ok(Toy2d::Rectangle),
            "swiss_roll" => Ok(Toy2d::SwissRoll),
            other => Err(Error::validation(format!(
                "unknown toy shape {other:?} (expected \"rectangle\" or \"swiss_roll\")"
            ))),
        }
    }
}

const SWISS_T0: f64 = std::f64::consts::PI;
const SWISS_T1: f64 = 5.0 * std::f64::consts::PI;
const SWISS_NOISE: f64 = 0.1;

#[derive(Debug)]
struct Toy {
    shape: Toy2d,
    mean: [f64; 2],
    whiten: [[f64; 2]; 2],
}

impl Toy {
    fn new(shape: Toy2d) -> Result<Self> {
        let (mean, cov) = match shape {
            Toy2d::Rectangle => ([0.0, 0.0], [[1.0 / 3.0, 0.0], [0.0, 1.0 / 12.0]]),
            Toy2d::SwissRoll => swiss_roll_moments(),
        };
        let cov = SpdMatrix::new_definite(DMatrix::from_row_slice(2, 2, &[cov[0][0], cov[0][1], cov[1][0], cov[1][1]]))?;
        let w = linalg::spd_inv_sqrt(&cov)?;
        Ok(Toy {
            shape,
            mean,
            whiten: [[w[(0, 0)], w[(0, 1)]], [w[(1, 0)], w[(1, 1)]]],
        })
    }

    fn raw_point(&self, rng: &mut dyn RngCore) -> [f64; 2] {
        match self.shape {
            Toy2d::Rectangle => [rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)],
            Toy2d::SwissRoll => {
                let t = rng.random_range(SWISS_T0..SWISS_T1);
                let e: f64 = rng.sample(StandardNormal);
                let r = t / SWISS_T1 + SWISS_NOISE * e;
                [r * t.cos(), r * t.sin()]
            }
        }
    }
}

/// Exact mean and covariance of the raw spiral, by composite Simpson quadrature over `t`.
fn swiss_roll_moments() -> ([f64; 2], [[f64; 2]; 2]) {
    let n = 40_000;
    let h = (SWISS_T1 - SWISS_T0) / n as f64;
    let mut acc = [0.0; 5];
    for i in 0..=n {
        let t = SWISS_T0 + i as f64 * h;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let r1 = t / SWISS_T1;
        let r2 = r1 * r1 + SWISS_NOISE * SWISS_NOISE;
        let (s, c) = t.sin_cos();
        acc[0] += w * r1 * c;
        acc[1] += w * r1 * s;
        acc[2] += w * r2 * c * c;
        acc[3] += w * r2 * c * s;
        acc[4] += w * r2 * s * s;
    }
    let scale = h / 3.0 / (SWISS_T1 - SWISS_T0);
    let m = [acc[0] * scale, acc[1] * scale];
    let cxx = acc[2] * scale - m[0] * m[0];
    let cxy = acc[3] * scale - m[0] * m[1];
    let cyy = acc[4] * scale - m[1] * m[1];
    (m, [[cxx, cxy], [cxy, cyy]])
}

impl Measure for Toy {
    fn dim(&self) -> usize {
        2
    }

    fn sample(&self, rng: &mut dyn RngCore, n: usize) -> Result<Batch> {
        let mut out = Array2::zeros((n, 2));
        for mut row in out.rows_mut() {
            let p = self.raw_point(rng);
            let c = [p[0] - self.mean[0], p[1] - self.mean[1]];
            row[0] = self.whiten[0][0] * c[0] + self.whiten[0][1] * c[1];
            row[1] = self.whiten[1][0] * c[0] + self.whiten[1][1] * c[1];
        }
        Ok(out)
    }

    fn descriptor(&self) -> Descriptor {
        Descriptor::new("toy2d", json!({ "shape": self.shape }))
    }
}

pub fn toy2d_sampler(shape: Toy2d) -> Result<Sampler> {
    Ok(Sampler::new(Toy::new(shape)?))
}

/// Mean and `(n−1)`-normalized covariance of the rows of `x`.
pub fn batch_moments(x: &ArrayView2<f64>) -> Result<(DVector<f64>, SpdMatrix)> {
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::validation("at least two samples are needed for a covariance"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let cov = DMatrix::from_fn(d, d, |i, j| cov[(i, j)]);
    Ok((
        DVector::from_iterator(d, mean.iter().copied()),
        SpdMatrix::from_symmetric_unchecked(cov),
    ))
}

/// Moments of `n_samples` draws, accumulated in chunks around a pivot.
pub fn empirical_moments(s: &Sampler, n_samples: usize, rng: &mut dyn RngCore) -> Result<(DVector<f64>, SpdMatrix)> {
    let d = s.dim();
    if n_samples < d + 1 || n_samples < 2 {
        return Err(Error::validation(format!(
            "{n_samples} samples cannot estimate a {d}-dimensional covariance"
        )));
    }
    const CHUNK: usize = 1 << 16;
    let mut pivot: Option<Array1<f64>> = None;
    let mut s1 = Array1::<f64>::zeros(d);
    let mut s2 = Array2::<f64>::zeros((d, d));
    let mut done = 0;
    while done < n_samples {
        let m = CHUNK.min(n_samples - done);
        let x = s.sample(rng, m)?;
        let p = pivot.get_or_insert_with(|| x.mean_axis(Axis(0)).expect("non-empty"));
        let c = &x - &*p;
        s1 += &c.sum_axis(Axis(0));
        s2 += &c.t().dot(&c);
        done += m;
    }
    let n = n_samples as f64;
    let pivot = pivot.expect("at least one chunk");
    let dm = &s1 / n;
    let mean = &pivot + &dm;
    let cov = DMatrix::from_fn(d, d, |i, j| (s2[(i, j)] - n * dm[i] * dm[j]) / (n - 1.0));
    Ok((
        DVector::from_iterator(d, mean.iter().copied()),
        SpdMatrix::from_symmetric_unchecked(cov),
    ))
}

/// CSV with header `x0,…,x{D−1}`.
pub fn write_csv<W: Write>(batch: &ArrayView2<f64>, mut w: W) -> Result<()> {
    let header: Vec<String> = (0..batch.ncols()).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for row in batch.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_kinds_parse() {
        assert_eq!("uniform".parse::<BaseKind>().unwrap(), BaseKind::Uniform);
        assert!(matches!("cauchy".parse::<BaseKind>(), Err(Error::Validation(_))));
        assert!(base_sampler(BaseKind::Gaussian, 0).is_err());
    }

    #[test]
    fn seeded_batches_repeat() {
        let s = base_sampler(BaseKind::Uniform, 3).unwrap();
        assert_eq!(s.sample_seeded(4, 10).unwrap(), s.sample_seeded(4, 10).unwrap());
        assert_ne!(s.sample_seeded(4, 10).unwrap(), s.sample_seeded(5, 10).unwrap());
    }

    #[test]
    fn spectrum_examples() {
        assert_eq!(scatter_spectrum(2).unwrap(), vec![0.5, 2.0]);
        let s3 = scatter_spectrum(3).unwrap();
        assert!((s3[0] - 0.5).abs() < 1e-15 && (s3[1] - 1.0).abs() < 1e-15 && s3[2] == 2.0);
        assert!(scatter_spectrum(1).is_err());
    }

    #[test]
    fn population_members_keep_spectrum() {
        let spec = make_scatter_population(6, 4, 21).unwrap();
        spec.validate().unwrap();
        for m in &spec.members {
            let ev = m.scatter.eigenvalues();
            assert!((ev[0] - 0.5).abs() < 1e-10 && (ev[5] - 2.0).abs() < 1e-10);
        }
        assert_eq!(spec, make_scatter_population(6, 4, 21).unwrap());
        assert!(make_scatter_population(1, 2, 0).is_err());
    }

    #[test]
    fn weights_validation() {
        assert!(validate_weights(&[0.25, 0.75]).is_ok());
        assert!(validate_weights(&[0.5, 0.6]).is_err());
        assert!(validate_weights(&[1.5, -0.5]).is_err());
        assert!(validate_weights(&[]).is_err());
    }

    #[test]
    fn constant_sampler_moments() {
        let s = Sampler::constant(&[1.0, -2.0]).unwrap();
        let (m, c) = empirical_moments(&s, 100, &mut rng::seeded(0)).unwrap();
        assert_eq!(m.as_slice(), &[1.0, -2.0]);
        assert!(c.iter().all(|v| v.abs() < 1e-15));
        assert!(empirical_moments(&s, 2, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn pushforward_checks_dimensions() {
        let s = base_sampler(BaseKind::Gaussian, 2).unwrap();
        let a = Arc::new(AffineMap::identity(3));
        assert!(pushforward(&s, a).is_err());
        let liar = Arc::new(FnMap::new("liar", 2, 2, |x| Ok(Array2::zeros((x.nrows(), 3)))));
        let p = pushforward(&s, liar).unwrap();
        assert!(matches!(p.sample_seeded(0, 4), Err(Error::Validation(_))));
    }

    #[test]
    fn pushforward_composes() {
        let s = base_sampler(BaseKind::Gaussian, 2).unwrap();
        let f = AffineMap::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]), DVector::from_vec(vec![1.0, 0.0])).unwrap();
        let g = AffineMap::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 1.0, 3.0]), DVector::from_vec(vec![0.0, -1.0])).unwrap();
        let nested = pushforward(&pushforward(&s, Arc::new(f.clone())).unwrap(), Arc::new(g.clone())).unwrap();
        let direct = pushforward(&s, Arc::new(g.compose(&f).unwrap())).unwrap();
        let a = nested.sample_seeded(3, 50).unwrap();
        let b = direct.sample_seeded(3, 50).unwrap();
        assert!((a - b).iter().all(|v| v.abs() < 1e-12));
        let id = pushforward(&s, Arc::new(AffineMap::identity(2))).unwrap();
        assert_eq!(id.sample_seeded(8, 20).unwrap(), s.sample_seeded(8, 20).unwrap());
    }

    #[test]
    fn csv_has_header() {
        let x = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let mut out = Vec::new();
        write_csv(&x.view(), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn affine_relu_net_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 0.0, 3.0, -1.0]);
        let map = AffineMap::new(a, DVector::from_vec(vec![0.25, -4.0])).unwrap();
        let net = affine_as_relu_net(&map, 3).unwrap();
        assert_eq!(net.layer_sizes(), &[3, 4, 4, 4, 2]);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * (j as f64 + 0.5));
        let diff = net.forward(&x.view()).unwrap() - map.apply(&x.view()).unwrap();
        assert!(diff.iter().all(|v| v.abs() < 1e-12));
    }
}
