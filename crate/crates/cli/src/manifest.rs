//! Per-run manifest: resolved config, seed, versions, scores and artifact list.

use std::fs;
use std::path::{Path, PathBuf};

use barywin::gaussian_ref::GaussianMeasure;
use barywin::linalg::SpdMatrix;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "barywin-manifest v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub barywin: String,
    pub cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            barywin: barywin::VERSION.to_string(),
            cli: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Mean and covariance in plain JSON arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianRecord {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl GaussianRecord {
    pub fn from_measure(g: &GaussianMeasure) -> Self {
        let c = g.cov.as_matrix();
        GaussianRecord {
            mean: g.mean.iter().copied().collect(),
            cov: c.row_iter().map(|r| r.iter().copied().collect()).collect(),
        }
    }

    pub fn to_measure(&self) -> CliResult<GaussianMeasure> {
        let d = self.mean.len();
        if self.cov.len() != d || self.cov.iter().any(|r| r.len() != d) {
            return Err(CliError::Missing("manifest truth has inconsistent shape".into()));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| self.cov[i][j]);
        Ok(GaussianMeasure::new_psd(DVector::from_vec(self.mean.clone()), SpdMatrix::new(cov)?)?)
    }
}

/// One line of the `report` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dim: usize,
    pub method: String,
    pub uvp: Option<f64>,
    pub iterations: Option<usize>,
    pub wall_seconds: Option<f64>,
}

/// A named scalar with its acceptance limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl CheckRecord {
    pub fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        CheckRecord {
            name: name.into(),
            value,
            limit,
            pass: value < limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: ExperimentKind,
    pub seed: u64,
    pub dim: usize,
    pub weights: Vec<f64>,
    /// Resolved configuration; `barywin run manifest.json` repeats the run.
    pub config: ExperimentConfig,
    pub versions: Versions,
    pub truth: Option<GaussianRecord>,
    pub rows: Vec<ReportRow>,
    pub checks: Vec<CheckRecord>,
    /// Files written next to the manifest, relative to its directory.
    pub artifacts: Vec<String>,
    pub wall_seconds: f64,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, dim: usize, weights: Vec<f64>) -> Self {
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            kind: config.kind,
            seed: config.seed,
            dim,
            weights,
            config: config.clone(),
            versions: Versions::current(),
            truth: None,
            rows: Vec::new(),
            checks: Vec::new(),
            artifacts: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Missing(format!("{}: malformed manifest: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Missing(format!(
                "{}: unsupported manifest format {:?}",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

/// Manifests in `dir` and its immediate subdirectories, sorted by path.
pub fn find_manifests(dir: &Path) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Missing(format!("{} is not a directory", dir.display())));
    }
    let mut found = Vec::new();
    let own = dir.join(MANIFEST_FILE);
    if own.is_file() {
        found.push(own);
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path().join(MANIFEST_FILE);
        if p.is_file() {
            found.push(p);
        }
    }
    if found.is_empty() {
        return Err(CliError::Missing(format!(
            "no {MANIFEST_FILE} in {} or its subdirectories",
            dir.display()
        )));
    }
    found.sort();
    Ok(found)
}
