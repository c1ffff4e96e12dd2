//! Dense symmetric matrix utilities for the Gaussian reference stack.
//!
//! Square roots go through a symmetric eigendecomposition. Eigenvalues that
//! are negative by less than `1e-12` times the largest magnitude are treated
//! as round-off and clamped to zero; anything more negative is rejected.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative tolerance for symmetry checks and eigenvalue clamping.
pub const REL_TOL: f64 = 1e-12;

/// A symmetric positive semidefinite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry and positive semidefiniteness. The stored matrix is
    /// the exact symmetric part of `m`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        let sym = symmetrized(&m)?;
        let (min, scale) = eigen_range(&sym);
        if min < -REL_TOL * scale {
            return Err(Error::NotPsd { eigenvalue: min });
        }
        Ok(SpdMatrix(sym))
    }

    /// Like [`SpdMatrix::new`] but requires every eigenvalue to be strictly positive
    /// relative to the largest one.
    pub fn new_definite(m: DMatrix<f64>) -> Result<Self> {
        let sym = symmetrized(&m)?;
        let (min, scale) = eigen_range(&sym);
        if min < -REL_TOL * scale {
            return Err(Error::NotPsd { eigenvalue: min });
        }
        if min <= REL_TOL * scale || scale == 0.0 {
            return Err(Error::Conditioning {
                eigenvalue: min,
                threshold: REL_TOL * scale,
            });
        }
        Ok(SpdMatrix(sym))
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix(DMatrix::identity(dim, dim))
    }

    pub fn zeros(dim: usize) -> Self {
        SpdMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Wraps a matrix that is symmetric PSD by construction (e.g. `B Bᵀ`),
    /// only symmetrizing away round-off.
    pub(crate) fn from_symmetric_unchecked(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SpdMatrix((m + t) * 0.5)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.0.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

impl Deref for SpdMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

fn symmetrized(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::validation(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if let Some(i) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "matrix entry".into(),
            index: i,
        });
    }
    let t = m.transpose();
    let asym = (m - &t).norm();
    let scale = m.norm();
    if asym > REL_TOL * scale.max(f64::MIN_POSITIVE) && asym > 0.0 {
        return Err(Error::validation(format!(
            "matrix is not symmetric (‖A − Aᵀ‖_F = {asym:e}, ‖A‖_F = {scale:e})"
        )));
    }
    Ok((m + t) * 0.5)
}

/// (smallest eigenvalue, largest absolute eigenvalue)
fn eigen_range(sym: &DMatrix<f64>) -> (f64, f64) {
    if sym.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = sym.clone().symmetric_eigen().eigenvalues;
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    let scale = ev.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    (min, scale)
}

/// Rebuilds `V f(Λ) Vᵀ` from a symmetric eigendecomposition.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = f(lambda);
        scaled.column_mut(j).scale_mut(s);
    }
    let out = scaled * v.transpose();
    let t = out.transpose();
    (out + t) * 0.5
}

/// Principal square root of a PSD matrix.
pub fn spd_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    let (min, scale) = eigen_range(&m.0);
    if min < -REL_TOL * scale {
        return Err(Error::NotPsd { eigenvalue: min });
    }
    Ok(SpdMatrix(spectral_map(&m.0, |l| l.max(0.0).sqrt())))
}

/// Inverse principal square root of a positive definite matrix.
pub fn spd_inv_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    let (min, scale) = eigen_range(&m.0);
    let threshold = (REL_TOL * scale).max(1e-300);
    if min <= threshold {
        return Err(Error::Conditioning {
            eigenvalue: min,
            threshold,
        });
    }
    Ok(SpdMatrix(spectral_map(&m.0, |l| 1.0 / l.sqrt())))
}

/// Square root on a raw matrix known to be symmetric PSD up to round-off.
pub(crate) fn sqrt_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Ok(spd_sqrt(&SpdMatrix::new(m.clone())?)?.0)
}

/// Haar-distributed rotation: QR of a Gaussian matrix, columns sign-corrected
/// by `diag(R)`, first column flipped if needed so that `det Q = +1`.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if dim == 0 {
        return Err(Error::validation("rotation dimension must be at least 1"));
    }
    let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    Ok(q)
}

/// [`random_rotation`] from a fresh generator seeded with `seed`.
pub fn random_rotation_seeded(dim: usize, seed: u64) -> Result<DMatrix<f64>> {
    random_rotation(dim, &mut crate::rng::seeded(seed))
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
