//! Experiment files: one TOML document per experiment.
//!
//! ```toml
//! kind = "gaussian-bench"
//! seed = 0
//! dims = [2, 4]
//! weights = [0.1, 0.2, 0.3, 0.4]
//! budget = "desk"          # or "full" (the full-length schedule)
//!
//! [win]                    # any WinConfig key overrides the budget preset
//! k_v = 20
//! lr_g = { initial_lr = 1e-3, decay_every = 10000, decay_factor = 0.5 }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use barywin::bench::BENCHMARK_WEIGHTS;
use barywin::congruent::ConjugateSolverConfig;
use barywin::measures::{validate_weights, BaseKind, Toy2d};
use barywin::nn::LrSchedule;
use barywin::ot_mmr::{InverseMapConfig, MmrConfig};
use barywin::win::WinConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Environment variable that overrides the output directory.
pub const OUT_ENV: &str = "BARYWIN_OUT";

/// Largest dimension accepted for log-sum-exp systems; every sample costs two
/// iterative conjugate solves.
pub const MAX_LSE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    GaussianBench,
    UniformBench,
    Toy2d,
    CongruentDataset,
    WinTrain,
    InverseMaps,
    LemmaChecks,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GaussianBench => "gaussian-bench",
            ExperimentKind::UniformBench => "uniform-bench",
            ExperimentKind::Toy2d => "toy2d",
            ExperimentKind::CongruentDataset => "congruent-dataset",
            ExperimentKind::WinTrain => "win-train",
            ExperimentKind::InverseMaps => "inverse-maps",
            ExperimentKind::LemmaChecks => "lemma-checks",
        }
    }

    fn is_congruent(self) -> bool {
        matches!(self, ExperimentKind::CongruentDataset | ExperimentKind::WinTrain)
    }

    /// Kinds that may sweep several dimensions in one file.
    fn multi_dim(self) -> bool {
        matches!(
            self,
            ExperimentKind::GaussianBench | ExperimentKind::UniformBench | ExperimentKind::LemmaChecks
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    #[default]
    Quadratic,
    LogSumExp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CongruentSection {
    pub family: Family,
    /// Eigenvalue range of the random quadratic potentials.
    pub spectrum: [f64; 2],
    pub base: BaseKind,
    /// Samples written per measure by `congruent-dataset`.
    pub samples: usize,
    /// Random points for the congruence residual.
    pub check_points: usize,
}

impl Default for CongruentSection {
    fn default() -> Self {
        CongruentSection {
            family: Family::Quadratic,
            spectrum: [0.3, 3.0],
            base: BaseKind::Gaussian,
            samples: 2000,
            check_points: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub shape: Toy2d,
    /// Members are shifted to a circle of this radius so the clouds separate.
    pub spread: f64,
}

impl Default for ToySection {
    fn default() -> Self {
        ToySection {
            shape: Toy2d::Rectangle,
            spread: 3.0,
        }
    }
}

/// The file as written.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: ExperimentKind,
    #[serde(default)]
    seed: u64,
    out: Option<PathBuf>,
    dim: Option<usize>,
    dims: Option<Vec<usize>>,
    n: Option<usize>,
    weights: Option<Vec<f64>>,
    #[serde(default)]
    budget: Budget,
    #[serde(default)]
    win: toml::Table,
    #[serde(default)]
    inverse: toml::Table,
    #[serde(default)]
    solver: ConjugateSolverConfig,
    #[serde(default)]
    congruent: CongruentSection,
    #[serde(default)]
    toy: ToySection,
    plot_samples: Option<usize>,
}

/// Fully resolved experiment; stored verbatim in every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub out: PathBuf,
    pub dims: Vec<usize>,
    /// Input weights; empty for congruent kinds, whose weights come from the system.
    pub weights: Vec<f64>,
    pub win: WinConfig,
    pub inverse: InverseMapConfig,
    pub solver: ConjugateSolverConfig,
    pub congruent: CongruentSection,
    pub toy: ToySection,
    pub plot_samples: usize,
}

/// Potential and map schedules that settle the oscillating maximin pair.
pub fn default_inverse_config() -> InverseMapConfig {
    InverseMapConfig {
        total_iters: 1600,
        mmr: MmrConfig {
            k_v: 1,
            k_t: 5,
            batch_size: 256,
            lr_v: LrSchedule::new(1e-3, 400, 0.5).expect("valid"),
            lr_t: LrSchedule::new(1e-3, 2000, 0.5).expect("valid"),
        },
        hidden: None,
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

/// Replaces the keys of `base` named in `table`; unknown keys are rejected by
/// the target type.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: &toml::Table, section: &str) -> CliResult<T> {
    let mut merged = serde_json::to_value(base).map_err(|e| invalid(section, e))?;
    let patch = serde_json::to_value(table).map_err(|e| invalid(section, e))?;
    merge(&mut merged, patch);
    serde_json::from_value(merged).map_err(|e| invalid(section, e))
}

fn merge(into: &mut Value, patch: Value) {
    match (into, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML experiment file.
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        let cfg = ExperimentConfig::resolve(raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML experiment file, or the resolved config inside a manifest.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(&text).map_err(|e| invalid("manifest", e))?;
            let cfg: ExperimentConfig =
                serde_json::from_value(v.get("config").cloned().unwrap_or(Value::Null)).map_err(|e| invalid("manifest config", e))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        ExperimentConfig::from_toml_str(&text)
    }

    fn resolve(raw: RawConfig) -> CliResult<Self> {
        let kind = raw.kind;
        let dims = match (raw.dim, raw.dims) {
            (Some(_), Some(_)) => return Err(invalid("dim", "give either `dim` or `dims`, not both")),
            (Some(d), None) => vec![d],
            (None, Some(ds)) => ds,
            (None, None) if kind.multi_dim() => vec![2, 4, 8, 16],
            (None, None) => vec![2],
        };
        let weights = if kind.is_congruent() {
            if raw.weights.is_some() || raw.n.is_some() {
                return Err(invalid("weights", "congruent experiments take their weights from the system"));
            }
            Vec::new()
        } else {
            match (raw.n, raw.weights) {
                (Some(n), Some(w)) if n != w.len() => {
                    return Err(invalid("n", format!("n = {n} but {} weights are given", w.len())))
                }
                (_, Some(w)) => w,
                (Some(0), None) => return Err(invalid("n", "at least one input is needed")),
                (Some(n), None) => vec![1.0 / n as f64; n],
                (None, None) => BENCHMARK_WEIGHTS.to_vec(),
            }
        };
        let preset = match raw.budget {
            Budget::Desk => WinConfig::desk(),
            Budget::Full => WinConfig::default(),
        };
        Ok(ExperimentConfig {
            kind,
            seed: raw.seed,
            out: raw.out.unwrap_or_else(|| PathBuf::from("runs").join(kind.name())),
            dims,
            weights,
            win: overlay(&preset, &raw.win, "[win]")?,
            inverse: overlay(&default_inverse_config(), &raw.inverse, "[inverse]")?,
            solver: raw.solver,
            congruent: raw.congruent,
            toy: raw.toy,
            plot_samples: raw.plot_samples.unwrap_or(500),
        })
    }

    /// Checks every field; runs before any sampling.
    pub fn validate(&self) -> CliResult<()> {
        if self.dims.is_empty() {
            return Err(invalid("dims", "at least one dimension is needed"));
        }
        if self.dims.len() > 1 && !self.kind.multi_dim() {
            return Err(invalid("dims", format!("{} runs a single dimension", self.kind.name())));
        }
        let min_dim = match self.kind {
            ExperimentKind::CongruentDataset | ExperimentKind::WinTrain => 1,
            _ => 2,
        };
        if let Some(d) = self.dims.iter().find(|&&d| d < min_dim) {
            return Err(invalid("dims", format!("dimension {d} is below the minimum {min_dim} for {}", self.kind.name())));
        }
        if self.kind == ExperimentKind::Toy2d && self.dims != [2] {
            return Err(invalid("dim", "toy2d populations are two-dimensional"));
        }
        if !self.kind.is_congruent() {
            validate_weights(&self.weights).map_err(|e| invalid("weights", strip(e)))?;
        }
        self.win.validate().map_err(|e| invalid("[win]", strip(e)))?;
        self.inverse.mmr.validate().map_err(|e| invalid("[inverse]", strip(e)))?;
        if self.inverse.total_iters == 0 {
            return Err(invalid("[inverse] total_iters", "must be positive"));
        }
        self.solver.validate().map_err(|e| invalid("[solver]", strip(e)))?;
        let [lo, hi] = self.congruent.spectrum;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid("[congruent] spectrum", format!("need 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if self.congruent.samples < 2 || self.congruent.check_points == 0 {
            return Err(invalid("[congruent]", "samples must be at least 2 and check_points positive"));
        }
        if self.kind.is_congruent() && self.congruent.family == Family::LogSumExp && self.dims[0] > MAX_LSE_DIM {
            return Err(invalid(
                "dim",
                format!("log-sum-exp systems are limited to dimension {MAX_LSE_DIM}"),
            ));
        }
        if !(self.toy.spread >= 0.0 && self.toy.spread.is_finite()) {
            return Err(invalid("[toy] spread", "must be finite and non-negative"));
        }
        Ok(())
    }

    /// The single dimension of a one-dimension experiment.
    pub fn dim(&self) -> usize {
        self.dims[0]
    }
}

fn strip(e: barywin::Error) -> String {
    match e {
        barywin::Error::Validation(m) => m,
        other => other.to_string(),
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    span.map(|r| format!(" (line {})", text[..r.start.min(text.len())].lines().count().max(1)))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = ExperimentConfig::from_toml_str("kind = \"gaussian-bench\"").unwrap();
        assert_eq!(cfg.dims, vec![2, 4, 8, 16]);
        assert_eq!(cfg.weights, BENCHMARK_WEIGHTS.to_vec());
        assert_eq!(cfg.win, WinConfig::desk());
    }

    #[test]
    fn win_overrides_merge_into_the_preset() {
        let cfg = ExperimentConfig::from_toml_str(
            "kind = \"toy2d\"\n[win]\nk_v = 3\nlr_g = { initial_lr = 0.01, decay_every = 5, decay_factor = 0.5 }\n",
        )
        .unwrap();
        assert_eq!(cfg.win.k_v, 3);
        assert_eq!(cfg.win.lr_g.initial_lr, 0.01);
        assert_eq!(cfg.win.k_t, WinConfig::desk().k_t);
    }

    #[test]
    fn partial_schedule_override() {
        let cfg = ExperimentConfig::from_toml_str("kind = \"toy2d\"\n[win.lr_v]\ninitial_lr = 0.002\n").unwrap();
        assert_eq!(cfg.win.lr_v.initial_lr, 0.002);
        assert_eq!(cfg.win.lr_v.decay_every, WinConfig::desk().lr_v.decay_every);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            "kind = \"toy2d\"\nbogus = 1",
            "kind = \"toy2d\"\n[win]\nkv = 3",
            "kind = \"toy2d\"\n[solver]\nrate = 3.0",
            "kind = \"toy2d\"\n[toy]\nshape = \"circle\"",
        ] {
            assert!(matches!(ExperimentConfig::from_toml_str(text), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn bad_weights_name_the_field() {
        let err = ExperimentConfig::from_toml_str("kind = \"gaussian-bench\"\nweights = [0.5, 0.6]").unwrap_err();
        assert!(err.to_string().contains("weights"), "{err}");
        let err = ExperimentConfig::from_toml_str("kind = \"gaussian-bench\"\nn = 3\nweights = [0.5, 0.5]").unwrap_err();
        assert!(err.to_string().contains("n = 3"), "{err}");
    }

    #[test]
    fn congruent_kinds_reject_weights() {
        assert!(ExperimentConfig::from_toml_str("kind = \"win-train\"\nweights = [1.0]").is_err());
        let cfg = ExperimentConfig::from_toml_str("kind = \"win-train\"\n[congruent]\nfamily = \"log-sum-exp\"").unwrap();
        assert_eq!(cfg.congruent.family, Family::LogSumExp);
        assert!(ExperimentConfig::from_toml_str("kind = \"win-train\"\ndim = 12\n[congruent]\nfamily = \"log-sum-exp\"").is_err());
    }

    #[test]
    fn dimension_rules() {
        assert!(ExperimentConfig::from_toml_str("kind = \"toy2d\"\ndim = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("kind = \"inverse-maps\"\ndims = [2, 4]").is_err());
        assert!(ExperimentConfig::from_toml_str("kind = \"gaussian-bench\"\ndims = [1]").is_err());
        assert!(ExperimentConfig::from_toml_str("kind = \"gaussian-bench\"\ndim = 2\ndims = [2]").is_err());
    }

    #[test]
    fn resolved_config_roundtrips_through_json() {
        let cfg = ExperimentConfig::from_toml_str("kind = \"inverse-maps\"\nseed = 9\n[inverse]\ntotal_iters = 10").unwrap();
        let back: ExperimentConfig = serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
