//! Closed-form references for Gaussian and location-scatter measures.
//!
//! All transport costs use the `½‖x − y‖²` ground cost, so every
//! Wasserstein quantity here is half of the textbook value.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, SpdMatrix};
use crate::measures::{validate_weights, AffineMap, LocationScatterSpec};

/// Mean and covariance. The covariance may be singular only for
/// estimates such as the constant predictor (see [`GaussianMeasure::new_psd`]).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMeasure {
    pub mean: DVector<f64>,
    pub cov: SpdMatrix,
}

impl GaussianMeasure {
    /// Requires a strictly positive definite covariance.
    pub fn new(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        let cov = SpdMatrix::new_definite(cov.into_inner())?;
        Self::new_psd(mean, cov)
    }

    /// Accepts a semidefinite covariance (point masses, degenerate estimates).
    pub fn new_psd(mean: DVector<f64>, cov: SpdMatrix) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(Error::validation(format!(
                "mean has dimension {}, covariance {}",
                mean.len(),
                cov.dim()
            )));
        }
        Ok(GaussianMeasure { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        GaussianMeasure {
            mean: DVector::zeros(dim),
            cov: SpdMatrix::identity(dim),
        }
    }

    pub fn point_mass(mean: DVector<f64>) -> Self {
        let d = mean.len();
        GaussianMeasure {
            mean,
            cov: SpdMatrix::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_dims(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::validation(format!(
            "dimension mismatch: {} vs {}",
            p.dim(),
            q.dim()
        )));
    }
    Ok(())
}

/// `½[‖μp − μq‖² + tr(Σp + Σq − 2(Σq^{½} Σp Σq^{½})^{½})]`
pub fn bures_w2_sq(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<f64> {
    check_dims(p, q)?;
    let root_q = linalg::spd_sqrt(&q.cov)?;
    let inner = &*root_q * p.cov.as_matrix() * &*root_q;
    let cross = linalg::sqrt_sym(&inner)?;
    let shift = (&p.mean - &q.mean).norm_squared();
    let bures = p.cov.trace() + q.cov.trace() - 2.0 * cross.trace();
    Ok((0.5 * (shift + bures)).max(0.0))
}

/// Settings for the covariance fixed-point iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

/// Converged barycenter covariance with its final residual.
#[derive(Debug, Clone)]
pub struct BarycenterSolution {
    pub cov: SpdMatrix,
    pub residual: f64,
    pub iterations: usize,
}

fn fixed_point_update(s: &DMatrix<f64>, covs: &[SpdMatrix], weights: &[f64]) -> Result<DMatrix<f64>> {
    let sym = SpdMatrix::new(s.clone())?;
    let root = linalg::spd_sqrt(&sym)?;
    let inv_root = linalg::spd_inv_sqrt(&sym)?;
    let d = s.nrows();
    let mut avg = DMatrix::zeros(d, d);
    for (c, &a) in covs.iter().zip(weights) {
        let inner = &*root * c.as_matrix() * &*root;
        avg += linalg::sqrt_sym(&inner)? * a;
    }
    let next = &*inv_root * &avg * &avg * &*inv_root;
    let t = next.transpose();
    Ok((next + t) * 0.5)
}

/// Barycenter covariance by `S ← S^{−½}(Σₙ αₙ (S^{½} Σₙ S^{½})^{½})² S^{−½}`,
/// started from `Σₙ αₙ Σₙ`.
pub fn gaussian_barycenter_solve(
    covs: &[SpdMatrix],
    weights: &[f64],
    cfg: FixedPointConfig,
) -> Result<BarycenterSolution> {
    if covs.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} covariances but {} weights",
            covs.len(),
            weights.len()
        )));
    }
    validate_weights(weights)?;
    let d = covs[0].dim();
    if covs.iter().any(|c| c.dim() != d) {
        return Err(Error::validation("covariances have different dimensions"));
    }
    for c in covs {
        SpdMatrix::new_definite(c.as_matrix().clone())?;
    }
    let mut s = covs
        .iter()
        .zip(weights)
        .fold(DMatrix::zeros(d, d), |acc, (c, &a)| acc + c.as_matrix() * a);
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let next = fixed_point_update(&s, covs, weights)?;
        residual = (&next - &s).norm() / next.norm();
        s = next;
        if residual < cfg.tol {
            return Ok(BarycenterSolution {
                cov: SpdMatrix::new(s)?,
                residual,
                iterations: it,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iter,
        residual,
    })
}

/// Barycenter covariance with the default tolerance (`1e-12`) and budget (`10⁴`).
pub fn gaussian_barycenter(covs: &[SpdMatrix], weights: &[f64]) -> Result<SpdMatrix> {
    Ok(gaussian_barycenter_solve(covs, weights, FixedPointConfig::default())?.cov)
}

/// `‖update(S) − S‖_F / ‖S‖_F` for a candidate barycenter `S`.
pub fn fixed_point_residual(s: &SpdMatrix, covs: &[SpdMatrix], weights: &[f64]) -> Result<f64> {
    let next = fixed_point_update(s.as_matrix(), covs, weights)?;
    Ok((&next - s.as_matrix()).norm() / s.as_matrix().norm())
}

/// Full Gaussian barycenter: weighted mean plus fixed-point covariance.
pub fn gaussian_barycenter_measure(measures: &[GaussianMeasure], weights: &[f64]) -> Result<GaussianMeasure> {
    if measures.is_empty() {
        return Err(Error::validation("no measures given"));
    }
    let covs: Vec<SpdMatrix> = measures.iter().map(|m| m.cov.clone()).collect();
    let cov = gaussian_barycenter(&covs, weights)?;
    let mean = measures
        .iter()
        .zip(weights)
        .fold(DVector::zeros(measures[0].dim()), |acc, (m, &a)| acc + &m.mean * a);
    GaussianMeasure::new(mean, cov)
}

/// `100 · BW²(estimate, truth) / (½ tr Σ_truth)`.
pub fn bw2_uvp(estimate: &GaussianMeasure, truth: &GaussianMeasure) -> Result<f64> {
    check_dims(estimate, truth)?;
    let var = truth.cov.trace();
    if var <= 0.0 {
        return Err(Error::validation("reference measure has zero variance; UVP is undefined"));
    }
    Ok(100.0 * bures_w2_sq(estimate, truth)? / (0.5 * var))
}

/// Brenier map between Gaussians: `A = Σp^{−½}(Σp^{½} Σq Σp^{½})^{½}Σp^{−½}`, `b = μq − Aμp`.
pub fn gaussian_ot_map(p: &GaussianMeasure, q: &GaussianMeasure) -> Result<AffineMap> {
    check_dims(p, q)?;
    let root = linalg::spd_sqrt(&p.cov)?;
    let inv_root = linalg::spd_inv_sqrt(&p.cov)?;
    let mid = linalg::sqrt_sym(&(&*root * q.cov.as_matrix() * &*root))?;
    let a = &*inv_root * mid * &*inv_root;
    let a = (&a + a.transpose()) * 0.5;
    let b = &q.mean - &a * &p.mean;
    AffineMap::new(a, b)
}

/// Exact barycenter moments of a location-scatter population over a standardized base.
pub fn location_scatter_truth(spec: &LocationScatterSpec) -> Result<GaussianMeasure> {
    spec.validate()?;
    let covs: Vec<SpdMatrix> = (0..spec.members.len()).map(|n| spec.member_covariance(n)).collect();
    let cov = gaussian_barycenter(&covs, &spec.weights)?;
    let mean = spec
        .members
        .iter()
        .zip(&spec.weights)
        .fold(DVector::zeros(spec.dim()), |acc, (m, &a)| acc + &m.shift * a);
    GaussianMeasure::new(mean, cov)
}

/// Moments of each member of a location-scatter population.
pub fn location_scatter_members(spec: &LocationScatterSpec) -> Result<Vec<GaussianMeasure>> {
    (0..spec.members.len())
        .map(|n| GaussianMeasure::new(spec.members[n].shift.clone(), spec.member_covariance(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mean: f64, var: f64) -> GaussianMeasure {
        GaussianMeasure::new(
            DVector::from_vec(vec![mean]),
            SpdMatrix::from_diagonal(&[var]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn bures_one_dimensional() {
        assert!((bures_w2_sq(&g1(0.0, 1.0), &g1(2.0, 4.0)).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(bures_w2_sq(&g1(1.0, 3.0), &g1(1.0, 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn bures_translation() {
        let cov = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let p = GaussianMeasure::new(DVector::from_vec(vec![0.0, 0.0]), cov.clone()).unwrap();
        let q = GaussianMeasure::new(DVector::from_vec(vec![1.0, -2.0]), cov).unwrap();
        assert!((bures_w2_sq(&p, &q).unwrap() - 2.5).abs() < 1e-12);
        assert!(bures_w2_sq(&p, &GaussianMeasure::standard(3)).is_err());
    }

    #[test]
    fn barycenter_one_dimensional() {
        let covs = [SpdMatrix::from_diagonal(&[1.0]).unwrap(), SpdMatrix::from_diagonal(&[9.0]).unwrap()];
        let s = gaussian_barycenter(&covs, &[0.5, 0.5]).unwrap();
        assert!((s[(0, 0)] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn barycenter_of_equal_covariances() {
        let c = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let s = gaussian_barycenter(&[c.clone(), c.clone(), c.clone()], &[0.2, 0.3, 0.5]).unwrap();
        assert!(linalg::rel_frobenius(&s, &c) < 1e-12);
    }

    #[test]
    fn barycenter_rejects_bad_weights() {
        let c = SpdMatrix::identity(2);
        assert!(gaussian_barycenter(&[c.clone(), c.clone()], &[0.5, 0.6]).is_err());
        assert!(gaussian_barycenter(&[c.clone()], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn iteration_budget_exhaustion_reports_residual() {
        let covs = [SpdMatrix::from_diagonal(&[1.0, 5.0]).unwrap(), SpdMatrix::from_diagonal(&[9.0, 0.2]).unwrap()];
        let cfg = FixedPointConfig { tol: 0.0, max_iter: 3 };
        match gaussian_barycenter_solve(&covs, &[0.5, 0.5], cfg) {
            Err(Error::NoConvergence { iterations, residual }) => {
                assert_eq!(iterations, 3);
                assert!(residual.is_finite());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uvp_examples() {
        let truth = g1(0.0, 1.0);
        assert_eq!(bw2_uvp(&truth, &truth).unwrap(), 0.0);
        assert!((bw2_uvp(&g1(0.0, 4.0), &truth).unwrap() - 100.0).abs() < 1e-12);
        let c = GaussianMeasure::point_mass(DVector::zeros(1));
        assert!((bw2_uvp(&c, &truth).unwrap() - 100.0).abs() < 1e-12);
        let zero = GaussianMeasure::point_mass(DVector::zeros(1));
        assert!(bw2_uvp(&truth, &zero).is_err());
    }

    #[test]
    fn ot_map_examples() {
        let m = gaussian_ot_map(&g1(0.0, 1.0), &g1(2.0, 4.0)).unwrap();
        assert!((m.matrix()[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((m.shift()[0] - 2.0).abs() < 1e-12);
        let p = g1(1.0, 3.0);
        let id = gaussian_ot_map(&p, &p).unwrap();
        assert!((id.matrix()[(0, 0)] - 1.0).abs() < 1e-12 && id.shift()[0].abs() < 1e-12);
    }
}
