//! Congruent convex potentials and input measures with a known barycenter.
//!
//! For a convex `ψ` and `β ∈ (0,1)` the β-left/right pair satisfies
//! `β∇ψˡ(x) + (1−β)∇ψʳ(x) = x`, where `yˡ = ∇ψˡ(x)` maximizes
//! `⟨x,y⟩ − β‖y‖²/2 − (1−β)ψ(y)` and `∇ψʳ(x) = ∇ψ(yˡ)`. Mixing `M` such
//! pairs through column-stochastic `γˡ, γʳ` yields `N` potentials whose
//! gradients average to the identity under the derived weights `α`, so
//! the pushforwards `∇ψₙ♯P` have barycenter `P`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::linalg::{random_rotation, SpdMatrix};
use crate::measures::{pushforward, validate_weights, AffineMap, PointMap, Sampler};
use crate::nn::Batch;

/// A λ-strongly convex, L-smooth function with analytic derivatives.
pub trait SmoothConvexFunction: fmt::Debug + Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &DVector<f64>) -> f64;
    fn grad(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn strong_convexity(&self) -> f64;
    fn smoothness(&self) -> f64;
    fn descriptor(&self) -> ConvexDescriptor;

    /// The matrix `A` when the function is `½xᵀAx`.
    fn quadratic_matrix(&self) -> Option<&DMatrix<f64>> {
        None
    }
}

/// Serializable form of the supported families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConvexDescriptor {
    Quadratic {
        matrix: Vec<Vec<f64>>,
    },
    LogSumExp {
        lambda: f64,
        epsilon: f64,
        planes: Vec<Vec<f64>>,
        offsets: Vec<f64>,
    },
}

impl ConvexDescriptor {
    pub fn build(&self) -> Result<Arc<dyn SmoothConvexFunction>> {
        match self {
            ConvexDescriptor::Quadratic { matrix } => {
                let m = rows_to_matrix(matrix)?;
                Ok(Arc::new(Quadratic::new(m)?))
            }
            ConvexDescriptor::LogSumExp {
                lambda,
                epsilon,
                planes,
                offsets,
            } => {
                let a = rows_to_matrix(planes)?;
                Ok(Arc::new(LogSumExp::new(*lambda, *epsilon, a, DVector::from_vec(offsets.clone()))?))
            }
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::validation("matrix rows must be non-empty and of equal length"));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// `ψ(x) = ½xᵀAx` with `A` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DMatrix<f64>,
    lambda: f64,
    smooth: f64,
}

impl Quadratic {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        let spd = SpdMatrix::new_definite(a)?;
        let eig = spd.eigenvalues();
        Ok(Quadratic {
            lambda: eig[0],
            smooth: eig[eig.len() - 1],
            a: spd.into_inner(),
        })
    }

    /// `a‖x‖²/2`
    pub fn isotropic(dim: usize, a: f64) -> Result<Self> {
        Quadratic::new(DMatrix::identity(dim, dim) * a)
    }

    /// Random rotation of a spectrum spread log-uniformly over `[lo, hi]`.
    pub fn random<R: Rng + ?Sized>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::validation(format!("need 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        let q = random_rotation(dim, rng)?;
        let eig = DVector::from_fn(dim, |_, _| lo * (hi / lo).powf(rng.random::<f64>()));
        let a = &q.transpose() * DMatrix::from_diagonal(&eig) * &q;
        Quadratic::new((&a + a.transpose()) * 0.5)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl SmoothConvexFunction for Quadratic {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.a * x))
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.a.clone()
    }

    fn strong_convexity(&self) -> f64 {
        self.lambda
    }

    fn smoothness(&self) -> f64 {
        self.smooth
    }

    fn descriptor(&self) -> ConvexDescriptor {
        ConvexDescriptor::Quadratic {
            matrix: matrix_to_rows(&self.a),
        }
    }

    fn quadratic_matrix(&self) -> Option<&DMatrix<f64>> {
        Some(&self.a)
    }
}

/// `ψ(x) = λ‖x‖²/2 + ε·log Σₖ exp(⟨aₖ, x⟩ + bₖ)`.
#[derive(Debug, Clone)]
pub struct LogSumExp {
    lambda: f64,
    epsilon: f64,
    /// One plane per row.
    planes: DMatrix<f64>,
    offsets: DVector<f64>,
}

/// Defaults for [`LogSumExp::random`].
pub const LSE_LAMBDA: f64 = 0.2;
pub const LSE_EPSILON: f64 = 1.0;
pub const LSE_PLANES: usize = 8;

impl LogSumExp {
    pub fn new(lambda: f64, epsilon: f64, planes: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) || !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::validation(format!("need λ > 0 and ε ≥ 0, got λ={lambda}, ε={epsilon}")));
        }
        if planes.nrows() == 0 || planes.nrows() != offsets.len() {
            return Err(Error::validation(format!(
                "{} planes but {} offsets",
                planes.nrows(),
                offsets.len()
            )));
        }
        if planes.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::validation("planes and offsets must be finite"));
        }
        Ok(LogSumExp {
            lambda,
            epsilon,
            planes,
            offsets,
        })
    }

    /// Standard normal planes and offsets.
    pub fn random<R: Rng + ?Sized>(dim: usize, lambda: f64, epsilon: f64, n_planes: usize, rng: &mut R) -> Result<Self> {
        let planes = DMatrix::from_fn(n_planes, dim, |_, _| StandardNormal.sample(rng));
        let offsets = DVector::from_fn(n_planes, |_, _| StandardNormal.sample(rng));
        LogSumExp::new(lambda, epsilon, planes, offsets)
    }

    pub fn random_default<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        LogSumExp::random(dim, LSE_LAMBDA, LSE_EPSILON, LSE_PLANES, rng)
    }

    /// Softmax weights of the planes at `x` and the log-sum-exp value.
    fn softmax(&self, x: &DVector<f64>) -> (DVector<f64>, f64) {
        let mut s = &self.planes * x + &self.offsets;
        let max = s.max();
        s.apply(|v| *v = (*v - max).exp());
        let total = s.sum();
        (s / total, max + total.ln())
    }
}

impl SmoothConvexFunction for LogSumExp {
    fn dim(&self) -> usize {
        self.planes.ncols()
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.lambda * x.norm_squared() + self.epsilon * self.softmax(x).1
    }

    fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        let (p, _) = self.softmax(x);
        x * self.lambda + self.planes.tr_mul(&p) * self.epsilon
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (p, _) = self.softmax(x);
        let mean = self.planes.tr_mul(&p);
        let weighted = DMatrix::from_fn(self.planes.nrows(), self.planes.ncols(), |k, j| p[k] * self.planes[(k, j)]);
        let cov = self.planes.tr_mul(&weighted) - &mean * mean.transpose();
        DMatrix::identity(self.dim(), self.dim()) * self.lambda + cov * self.epsilon
    }

    fn strong_convexity(&self) -> f64 {
        self.lambda
    }

    fn smoothness(&self) -> f64 {
        let max_sq = self.planes.row_iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
        self.lambda + self.epsilon * max_sq
    }

    fn descriptor(&self) -> ConvexDescriptor {
        ConvexDescriptor::LogSumExp {
            lambda: self.lambda,
            epsilon: self.epsilon,
            planes: matrix_to_rows(&self.planes),
            offsets: self.offsets.iter().copied().collect(),
        }
    }
}

/// Settings of the inner maximization behind `∇ψˡ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConjugateSolverConfig {
    /// Adam learning rate of the ascent phase.
    pub lr: f64,
    /// Adam steps; 0 skips straight to Newton.
    pub max_steps: usize,
    /// Target for `‖x − βy − (1−β)∇ψ(y)‖`.
    pub tol: f64,
    /// Finish with damped Newton steps once the residual drops below `polish_below`
    /// or the Adam budget runs out.
    pub newton_polish: bool,
    pub polish_below: f64,
    pub newton_steps: usize,
}

impl Default for ConjugateSolverConfig {
    fn default() -> Self {
        ConjugateSolverConfig {
            lr: 2e-2,
            max_steps: 1000,
            tol: 1e-8,
            newton_polish: true,
            polish_below: 1e-2,
            newton_steps: 50,
        }
    }
}

impl ConjugateSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.tol > 0.0 && self.polish_below > 0.0) {
            return Err(Error::validation("solver lr, tol and polish_below must be positive"));
        }
        if self.max_steps == 0 && !(self.newton_polish && self.newton_steps > 0) {
            return Err(Error::validation("solver has no steps to take"));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("β must lie in (0,1), got {beta}")))
    }
}

fn optimality_residual(psi: &dyn SmoothConvexFunction, beta: f64, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    x - y * beta - psi.grad(y) * (1.0 - beta)
}

/// `yˡ = argmax ⟨x,y⟩ − β‖y‖²/2 − (1−β)ψ(y)`.
pub fn grad_left(psi: &dyn SmoothConvexFunction, beta: f64, x: &DVector<f64>, cfg: &ConjugateSolverConfig) -> Result<DVector<f64>> {
    check_beta(beta)?;
    if x.len() != psi.dim() {
        return Err(Error::validation(format!("point of dimension {} for a {}-dimensional ψ", x.len(), psi.dim())));
    }
    if let Some(a) = psi.quadratic_matrix() {
        return Ok(left_matrix(a, beta)? * x);
    }

    let mut y = x.clone();
    let mut r = optimality_residual(psi, beta, x, &y);
    let mut steps = 0;
    let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
    let mut m = DVector::zeros(x.len());
    let mut v = DVector::zeros(x.len());
    while steps < cfg.max_steps && r.norm() >= cfg.tol && !(cfg.newton_polish && r.norm() < cfg.polish_below) {
        steps += 1;
        // `r` is the ascent direction of the concave objective.
        m = m * b1 + &r * (1.0 - b1);
        v = v * b2 + r.component_mul(&r) * (1.0 - b2);
        let mh = &m / (1.0 - b1.powi(steps as i32));
        let vh = &v / (1.0 - b2.powi(steps as i32));
        y += mh.zip_map(&vh, |a, b| cfg.lr * a / (b.sqrt() + eps));
        r = optimality_residual(psi, beta, x, &y);
    }

    if cfg.newton_polish {
        let mut newton = 0;
        while newton < cfg.newton_steps && r.norm() >= cfg.tol {
            newton += 1;
            let h = DMatrix::identity(x.len(), x.len()) * beta + psi.hessian(&y) * (1.0 - beta);
            let d = h.cholesky().ok_or(Error::Solver {
                steps: steps + newton,
                residual: r.norm(),
            })?;
            let dir = d.solve(&r);
            let r0 = r.norm();
            let mut t = 1.0;
            loop {
                let cand = &y + &dir * t;
                let rc = optimality_residual(psi, beta, x, &cand);
                if rc.norm() < r0 || t < 1e-10 {
                    y = cand;
                    r = rc;
                    break;
                }
                t *= 0.5;
            }
        }
        steps += newton;
    }

    let residual = r.norm();
    if residual < cfg.tol && y.iter().all(|v| v.is_finite()) {
        Ok(y)
    } else {
        Err(Error::Solver { steps, residual })
    }
}

/// `yʳ = ∇ψ(yˡ)`.
pub fn grad_right(psi: &dyn SmoothConvexFunction, beta: f64, x: &DVector<f64>, cfg: &ConjugateSolverConfig) -> Result<DVector<f64>> {
    Ok(psi.grad(&grad_left(psi, beta, x, cfg)?))
}

/// `(βI + (1−β)A)⁻¹`, the linear β-left gradient of `½xᵀAx`.
pub fn left_matrix(a: &DMatrix<f64>, beta: f64) -> Result<DMatrix<f64>> {
    check_beta(beta)?;
    let h = DMatrix::identity(a.nrows(), a.ncols()) * beta + a * (1.0 - beta);
    let inv = h
        .cholesky()
        .ok_or_else(|| Error::validation("βI + (1−β)A is not positive definite"))?
        .inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `α_n = Σₘ wₘ[βₘγˡₙₘ + (1−βₘ)γʳₙₘ]`.
pub fn derive_alpha(mix_weights: &[f64], betas: &[f64], gamma_left: &DMatrix<f64>, gamma_right: &DMatrix<f64>) -> Vec<f64> {
    (0..gamma_left.nrows())
        .map(|n| {
            (0..mix_weights.len())
                .map(|m| mix_weights[m] * (betas[m] * gamma_left[(n, m)] + (1.0 - betas[m]) * gamma_right[(n, m)]))
                .sum()
        })
        .collect()
}

fn check_column_stochastic(name: &str, g: &DMatrix<f64>) -> Result<()> {
    if let Some(v) = g.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::validation(format!("{name} has entry {v}, expected non-negative")));
    }
    for (m, col) in g.column_iter().enumerate() {
        let s = col.sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!("column {m} of {name} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// `M` base potentials mixed into `N` congruent ones.
#[derive(Debug, Clone)]
pub struct CongruentSystem {
    potentials: Vec<Arc<dyn SmoothConvexFunction>>,
    betas: Vec<f64>,
    mix_weights: Vec<f64>,
    gamma_left: DMatrix<f64>,
    gamma_right: DMatrix<f64>,
    alpha: Vec<f64>,
    solver: ConjugateSolverConfig,
    seed: Option<u64>,
}

/// JSON form of a [`CongruentSystem`]; enough to rebuild it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDescriptor {
    pub potentials: Vec<ConvexDescriptor>,
    pub betas: Vec<f64>,
    pub mix_weights: Vec<f64>,
    pub gamma_left: Vec<Vec<f64>>,
    pub gamma_right: Vec<Vec<f64>>,
    #[serde(default)]
    pub solver: ConjugateSolverConfig,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl CongruentSystem {
    pub fn new(
        potentials: Vec<Arc<dyn SmoothConvexFunction>>,
        betas: Vec<f64>,
        mix_weights: Vec<f64>,
        gamma_left: DMatrix<f64>,
        gamma_right: DMatrix<f64>,
    ) -> Result<Self> {
        let m = potentials.len();
        if m == 0 || betas.len() != m || mix_weights.len() != m {
            return Err(Error::validation(format!(
                "{m} potentials, {} betas and {} mixture weights",
                betas.len(),
                mix_weights.len()
            )));
        }
        let d = potentials[0].dim();
        if potentials.iter().any(|p| p.dim() != d) {
            return Err(Error::validation("potentials have different dimensions"));
        }
        for &b in &betas {
            check_beta(b)?;
        }
        validate_weights(&mix_weights)?;
        if gamma_left.ncols() != m || gamma_right.shape() != gamma_left.shape() || gamma_left.nrows() == 0 {
            return Err(Error::validation(format!(
                "γ matrices must both be N×{m}, got {:?} and {:?}",
                gamma_left.shape(),
                gamma_right.shape()
            )));
        }
        check_column_stochastic("γˡ", &gamma_left)?;
        check_column_stochastic("γʳ", &gamma_right)?;
        let alpha = derive_alpha(&mix_weights, &betas, &gamma_left, &gamma_right);
        if let Some(n) = alpha.iter().position(|a| *a <= 0.0) {
            return Err(Error::validation(format!("measure {n} receives zero weight")));
        }
        Ok(CongruentSystem {
            potentials,
            betas,
            mix_weights,
            gamma_left,
            gamma_right,
            alpha,
            solver: ConjugateSolverConfig::default(),
            seed: None,
        })
    }

    pub fn with_solver(mut self, solver: ConjugateSolverConfig) -> Result<Self> {
        solver.validate()?;
        self.solver = solver;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// `N = 3`, `M = 2`, `β = w = (½, ½)`, `γˡ = [e₁ e₂]`, `γʳ = [e₂ e₃]`; gives `α = (¼, ½, ¼)`.
    pub fn chain_configuration(psi1: Arc<dyn SmoothConvexFunction>, psi2: Arc<dyn SmoothConvexFunction>) -> Result<Self> {
        let gl = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let gr = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        CongruentSystem::new(vec![psi1, psi2], vec![0.5, 0.5], vec![0.5, 0.5], gl, gr)
    }

    /// The chain layout with `‖x‖²/2` for both potentials; every `∇ψₙ` is the identity.
    pub fn identity(dim: usize) -> Result<Self> {
        let id: Arc<dyn SmoothConvexFunction> = Arc::new(Quadratic::isotropic(dim, 1.0)?);
        CongruentSystem::chain_configuration(id.clone(), id)
    }

    /// Chain layout over two random quadratics with spectra in `[lo, hi]`.
    pub fn random_quadratic<R: Rng + ?Sized>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let p1 = Arc::new(Quadratic::random(dim, lo, hi, rng)?);
        let p2 = Arc::new(Quadratic::random(dim, lo, hi, rng)?);
        CongruentSystem::chain_configuration(p1, p2)
    }

    /// Chain layout over two random log-sum-exp potentials with the default parameters.
    pub fn random_log_sum_exp<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let p1 = Arc::new(LogSumExp::random_default(dim, rng)?);
        let p2 = Arc::new(LogSumExp::random_default(dim, rng)?);
        CongruentSystem::chain_configuration(p1, p2)
    }

    pub fn from_descriptor(d: &SystemDescriptor) -> Result<Self> {
        let potentials = d.potentials.iter().map(ConvexDescriptor::build).collect::<Result<Vec<_>>>()?;
        let sys = CongruentSystem::new(
            potentials,
            d.betas.clone(),
            d.mix_weights.clone(),
            rows_to_matrix(&d.gamma_left)?,
            rows_to_matrix(&d.gamma_right)?,
        )?
        .with_solver(d.solver)?;
        Ok(match d.seed {
            Some(s) => sys.with_seed(s),
            None => sys,
        })
    }

    pub fn descriptor(&self) -> SystemDescriptor {
        SystemDescriptor {
            potentials: self.potentials.iter().map(|p| p.descriptor()).collect(),
            betas: self.betas.clone(),
            mix_weights: self.mix_weights.clone(),
            gamma_left: matrix_to_rows(&self.gamma_left),
            gamma_right: matrix_to_rows(&self.gamma_right),
            solver: self.solver,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self.descriptor()).unwrap_or_else(|e| json!({ "error": e.to_string() }))
    }

    pub fn dim(&self) -> usize {
        self.potentials[0].dim()
    }

    pub fn num_measures(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn solver(&self) -> &ConjugateSolverConfig {
        &self.solver
    }

    pub fn is_quadratic(&self) -> bool {
        self.potentials.iter().all(|p| p.quadratic_matrix().is_some())
    }

    /// Coefficients of `∇ψ_n` on `∇ψₘˡ` and `∇ψₘʳ`, normalized by `α_n`.
    fn coefficients(&self, n: usize, m: usize) -> (f64, f64) {
        let w = self.mix_weights[m] / self.alpha[n];
        let b = self.betas[m];
        (w * b * self.gamma_left[(n, m)], w * (1.0 - b) * self.gamma_right[(n, m)])
    }

    /// `∇ψ_n` as matrices `B_n` when every base potential is quadratic.
    pub fn system_matrices(&self) -> Option<Vec<DMatrix<f64>>> {
        let d = self.dim();
        let pairs = self
            .potentials
            .iter()
            .zip(&self.betas)
            .map(|(p, &b)| {
                let a = p.quadratic_matrix()?;
                let l = left_matrix(a, b).ok()?;
                let r = a * &l;
                Some((l, (&r + r.transpose()) * 0.5))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(
            (0..self.num_measures())
                .map(|n| {
                    pairs.iter().enumerate().fold(DMatrix::zeros(d, d), |acc, (m, (l, r))| {
                        let (cl, cr) = self.coefficients(n, m);
                        acc + l * cl + r * cr
                    })
                })
                .collect(),
        )
    }

    /// `[∇ψ₁(x), …, ∇ψ_N(x)]`.
    pub fn system_grads(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        if x.len() != self.dim() {
            return Err(Error::validation(format!("point of dimension {} for a {}-dimensional system", x.len(), self.dim())));
        }
        let mut left_right = Vec::with_capacity(self.potentials.len());
        for (p, &b) in self.potentials.iter().zip(&self.betas) {
            let yl = grad_left(p.as_ref(), b, x, &self.solver)?;
            let yr = p.grad(&yl);
            left_right.push((yl, yr));
        }
        Ok((0..self.num_measures())
            .map(|n| {
                left_right.iter().enumerate().fold(DVector::zeros(x.len()), |acc, (m, (yl, yr))| {
                    let (cl, cr) = self.coefficients(n, m);
                    acc + yl * cl + yr * cr
                })
            })
            .collect())
    }

    /// `∇ψ_n` on every row of a batch.
    pub fn grad_batch(&self, n: usize, x: &ArrayView2<f64>) -> Result<Batch> {
        if n >= self.num_measures() {
            return Err(Error::validation(format!("measure index {n} out of range")));
        }
        if x.ncols() != self.dim() {
            return Err(Error::validation("batch dimension differs from the system"));
        }
        if let Some(mats) = self.system_matrices() {
            let b = &mats[n];
            return Ok(Array2::from_shape_fn(x.dim(), |(i, j)| (0..x.ncols()).map(|k| b[(j, k)] * x[(i, k)]).sum()));
        }
        let mut out = Array2::zeros(x.dim());
        for (row, mut dst) in x.rows().into_iter().zip(out.rows_mut()) {
            let p = DVector::from_iterator(row.len(), row.iter().copied());
            let g = self.grad_single(n, &p)?;
            dst.iter_mut().zip(g.iter()).for_each(|(d, v)| *d = *v);
        }
        Ok(out)
    }

    fn grad_single(&self, n: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        let mut acc = DVector::zeros(x.len());
        for (m, (p, &b)) in self.potentials.iter().zip(&self.betas).enumerate() {
            let (cl, cr) = self.coefficients(n, m);
            if cl == 0.0 && cr == 0.0 {
                continue;
            }
            let yl = grad_left(p.as_ref(), b, x, &self.solver)?;
            acc += &yl * cl + p.grad(&yl) * cr;
        }
        Ok(acc)
    }

    /// `max ‖Σ α_n ∇ψ_n(x) − x‖ / (1 + ‖x‖)` over the rows of `points`.
    pub fn verify_congruence(&self, points: &ArrayView2<f64>) -> Result<f64> {
        if points.ncols() != self.dim() {
            return Err(Error::validation("batch dimension differs from the system"));
        }
        let mats = self.system_matrices();
        let mut worst = 0.0_f64;
        for row in points.rows() {
            let x = DVector::from_iterator(row.len(), row.iter().copied());
            let grads = match &mats {
                Some(ms) => ms.iter().map(|b| b * &x).collect(),
                None => self.system_grads(&x)?,
            };
            let sum = grads.iter().zip(&self.alpha).fold(DVector::zeros(x.len()), |acc, (g, &a)| acc + g * a);
            worst = worst.max((sum - &x).norm() / (1.0 + x.norm()));
        }
        Ok(worst)
    }
}

/// `PointMap` view of `∇ψ_n`.
#[derive(Debug, Clone)]
pub struct SystemGradMap {
    system: Arc<CongruentSystem>,
    index: usize,
}

impl SystemGradMap {
    pub fn new(system: Arc<CongruentSystem>, index: usize) -> Result<Self> {
        if index >= system.num_measures() {
            return Err(Error::validation(format!("measure index {index} out of range")));
        }
        Ok(SystemGradMap { system, index })
    }
}

impl PointMap for SystemGradMap {
    fn input_dim(&self) -> usize {
        self.system.dim()
    }

    fn output_dim(&self) -> usize {
        self.system.dim()
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Result<Batch> {
        self.system.grad_batch(self.index, x)
    }

    fn describe(&self) -> Value {
        json!({ "congruent_gradient": { "index": self.index, "system": self.system.to_json() } })
    }
}

/// Inputs `∇ψ_n♯P` whose barycenter under `weights` is `P`.
#[derive(Debug, Clone)]
pub struct KnownBarycenterDataset {
    pub inputs: Vec<Sampler>,
    pub weights: Vec<f64>,
    pub base: Sampler,
}

/// Pushes `base` through every `∇ψ_n`. The base is assumed to have a
/// positive density on the whole space; the uniqueness argument needs it.
pub fn make_known_barycenter_dataset(base: &Sampler, sys: &CongruentSystem) -> Result<KnownBarycenterDataset> {
    if base.dim() != sys.dim() {
        return Err(Error::validation(format!(
            "base of dimension {} for a {}-dimensional system",
            base.dim(),
            sys.dim()
        )));
    }
    let shared = Arc::new(sys.clone());
    let inputs = match sys.system_matrices() {
        Some(mats) => mats
            .into_iter()
            .map(|b| {
                let d = b.nrows();
                pushforward(base, Arc::new(AffineMap::new(b, DVector::zeros(d))?))
            })
            .collect::<Result<Vec<_>>>()?,
        None => (0..sys.num_measures())
            .map(|n| pushforward(base, Arc::new(SystemGradMap::new(shared.clone(), n)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(KnownBarycenterDataset {
        inputs,
        weights: sys.alpha().to_vec(),
        base: base.clone(),
    })
}

/// Random column-stochastic `rows × cols` matrix.
pub fn random_column_stochastic(rows: usize, cols: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
    let mut g = DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>());
    for mut col in g.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn lse(dim: usize, seed: u64) -> LogSumExp {
        LogSumExp::random_default(dim, &mut rng::seeded(seed)).unwrap()
    }

    #[test]
    fn identity_potential_is_fixed() {
        let psi = Quadratic::isotropic(3, 1.0).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let cfg = ConjugateSolverConfig::default();
        assert!((grad_left(&psi, 0.3, &x, &cfg).unwrap() - &x).norm() < 1e-15);
        assert!((grad_right(&psi, 0.3, &x, &cfg).unwrap() - &x).norm() < 1e-15);
    }

    #[test]
    fn scalar_quadratic_closed_form() {
        let (a, beta) = (3.0, 0.25);
        let psi = Quadratic::isotropic(2, a).unwrap();
        let x = DVector::from_vec(vec![1.5, -0.5]);
        let cfg = ConjugateSolverConfig::default();
        let yl = grad_left(&psi, beta, &x, &cfg).unwrap();
        let yr = grad_right(&psi, beta, &x, &cfg).unwrap();
        let denom = beta + (1.0 - beta) * a;
        assert!((&yl - &x / denom).norm() < 1e-14);
        assert!((&yr - &x * (a / denom)).norm() < 1e-14);
        assert!((&yl * beta + &yr * (1.0 - beta) - &x).norm() < 1e-14);
    }

    #[test]
    fn iterative_solver_matches_matrix_quadratic() {
        // A log-sum-exp with ε = 0 is the isotropic quadratic λ‖x‖²/2 but takes the iterative path.
        let psi = LogSumExp::new(0.7, 0.0, DMatrix::zeros(1, 2), DVector::zeros(1)).unwrap();
        let x = DVector::from_vec(vec![2.0, -1.0]);
        let yl = grad_left(&psi, 0.4, &x, &ConjugateSolverConfig::default()).unwrap();
        assert!((yl - &x / (0.4 + 0.6 * 0.7)).norm() < 1e-8);
    }

    #[test]
    fn log_sum_exp_congruence_and_hessian() {
        let psi = lse(3, 7);
        let mut r = rng::seeded(8);
        let cfg = ConjugateSolverConfig::default();
        for _ in 0..20 {
            let x: DVector<f64> = DVector::from_fn(3, |_, _| { let v: f64 = StandardNormal.sample(&mut r); 2.0 * v });
            let beta = 0.1 + 0.8 * r.random::<f64>();
            let yl = grad_left(&psi, beta, &x, &cfg).unwrap();
            let yr = grad_right(&psi, beta, &x, &cfg).unwrap();
            assert!((&yl * beta + &yr * (1.0 - beta) - &x).norm() < 1e-7);
        }
        let x = DVector::from_vec(vec![0.2, -0.4, 1.0]);
        let h = psi.hessian(&x);
        for j in 0..3 {
            let mut e = DVector::zeros(3);
            e[j] = 1e-6;
            let fd = (psi.grad(&(&x + &e)) - psi.grad(&(&x - &e))) / 2e-6;
            assert!((fd - h.column(j)).norm() < 1e-6);
        }
    }

    #[test]
    fn chain_configuration_weights() {
        let sys = CongruentSystem::identity(2).unwrap();
        assert_eq!(sys.alpha(), &[0.25, 0.5, 0.25]);
        let x = DVector::from_vec(vec![1.0, 2.0]);
        for g in sys.system_grads(&x).unwrap() {
            assert!((g - &x).norm() < 1e-15);
        }
    }

    #[test]
    fn quadratic_system_is_congruent() {
        let sys = CongruentSystem::random_quadratic(4, 0.3, 3.0, &mut rng::seeded(1)).unwrap();
        let pts = Array2::from_shape_fn((64, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        assert!(sys.verify_congruence(&pts.view()).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_gamma() {
        let p: Arc<dyn SmoothConvexFunction> = Arc::new(Quadratic::isotropic(2, 1.0).unwrap());
        let g = DMatrix::from_row_slice(2, 1, &[0.5, 0.4]);
        let r = CongruentSystem::new(vec![p], vec![0.5], vec![1.0], g.clone(), g);
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn descriptor_roundtrip() {
        let sys = CongruentSystem::random_log_sum_exp(2, &mut rng::seeded(3)).unwrap().with_seed(3);
        let text = serde_json::to_string(&sys.descriptor()).unwrap();
        let back = CongruentSystem::from_descriptor(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back.descriptor(), sys.descriptor());
    }
}
