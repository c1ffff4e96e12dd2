//! `barywin report` and `barywin verify`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use barywin::congruent::{CongruentSystem, SystemDescriptor};
use barywin::measures::make_scatter_population;
use barywin::nn::Mlp;

use crate::checks::lemma_suite;
use crate::config::ExperimentKind;
use crate::error::{CliError, CliResult};
use crate::manifest::{find_manifests, CheckRecord, Manifest, ReportRow};
use crate::run::{congruence_check, generator_checkpoint, generator_uvp, inverse_checks, pair_checkpoints, METRICS_FILE, SYSTEM_FILE};

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

/// Summary table of every run under `dir`, sorted by dimension.
pub fn report(dir: &Path) -> CliResult<String> {
    let mut rows: Vec<(String, ReportRow)> = Vec::new();
    for path in find_manifests(dir)? {
        let m = Manifest::read(&path)?;
        rows.extend(m.rows.into_iter().map(|r| (m.kind.name().to_string(), r)));
    }
    if rows.is_empty() {
        return Err(CliError::Missing(format!("no runs with scores under {}", dir.display())));
    }
    rows.sort_by(|a, b| a.1.dim.cmp(&b.1.dim).then_with(|| a.0.cmp(&b.0)).then_with(|| b.1.method.cmp(&a.1.method)));
    let mut out = format!(
        "{:<18} {:>4}  {:<15} {:>12} {:>10} {:>9}\n",
        "experiment", "dim", "method", "final UVP %", "iterations", "wall s"
    );
    for (kind, r) in rows {
        out += &format!(
            "{:<18} {:>4}  {:<15} {:>12} {:>10} {:>9}\n",
            kind,
            r.dim,
            r.method,
            fmt_opt(r.uvp.map(|u| format!("{u:.3}"))),
            fmt_opt(r.iterations),
            fmt_opt(r.wall_seconds.map(|w| format!("{w:.1}")))
        );
    }
    Ok(out)
}

fn load_net(dir: &Path, rel: &str) -> CliResult<Mlp> {
    let p = dir.join(rel);
    let f = File::open(&p).map_err(|e| CliError::io(&p, e))?;
    Mlp::read_checkpoint(BufReader::new(f)).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0) || (a.is_nan() && b.is_nan())
}

struct Tally {
    lines: Vec<String>,
    failed: usize,
}

impl Tally {
    fn record(&mut self, run: &str, what: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        self.lines
            .push(format!("{} {run}: {what} {detail}", if pass { "ok  " } else { "FAIL" }));
    }

    /// A recomputed check must reproduce the stored value and respect its limit.
    fn reproduce(&mut self, run: &str, stored: &[CheckRecord], fresh: &CheckRecord) {
        let same = stored.iter().find(|c| c.name == fresh.name).map(|c| close(c.value, fresh.value));
        let detail = format!("{:.3e} (limit {:.1e})", fresh.value, fresh.limit);
        match same {
            Some(false) => self.record(run, &fresh.name, false, format!("{detail} differs from the manifest")),
            _ => self.record(run, &fresh.name, fresh.pass, detail),
        }
    }
}

fn metrics_rows(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let mut next = || lines.next().transpose().map_err(|e| CliError::io(path, e));
    if next()?.as_deref() != Some("# barywin-metrics v1") {
        return Err(CliError::Missing(format!("{}: missing the metrics version line", path.display())));
    }
    next()?;
    let mut rows = Vec::new();
    while let Some(l) = next()? {
        rows.push(l.split(',').map(str::to_string).collect());
    }
    Ok(rows)
}

fn verify_run(path: &Path, t: &mut Tally) -> CliResult<()> {
    let dir = path.parent().expect("manifest lives in a directory");
    let m = Manifest::read(path)?;
    let run = format!("{} ({})", dir.display(), m.kind.name());
    let cfg = &m.config;

    let missing: Vec<_> = m.artifacts.iter().filter(|a| !dir.join(a).is_file()).collect();
    t.record(&run, "artifacts present", missing.is_empty(), format!("{} files, missing {missing:?}", m.artifacts.len()));

    let truth = m.truth.as_ref().map(|r| r.to_measure()).transpose()?;
    let win_row = m.rows.iter().find(|r| r.method == "win");
    if let (Some(truth), Some(row)) = (&truth, win_row) {
        let g = load_net(dir, generator_checkpoint())?;
        t.record(&run, "generator shape", g.output_dim() == m.dim, format!("{:?}", g.layer_sizes()));
        let uvp = generator_uvp(&g, cfg, truth)?;
        let stored = row.uvp.unwrap_or(f64::NAN);
        t.record(&run, "generator UVP reproduces", close(uvp, stored), format!("{uvp:.6}% vs recorded {stored:.6}%"));
        if let Some(c) = m.checks.iter().find(|c| c.name == "uvp_percent") {
            t.record(&run, "UVP within limit", uvp < c.limit, format!("{uvp:.3}% (limit {}%)", c.limit));
        }
        for n in 0..m.weights.len() {
            let (map, pot) = pair_checkpoints(n, "checkpoints");
            let ok = load_net(dir, &map)?.output_dim() == m.dim && load_net(dir, &pot)?.output_dim() == 1;
            t.record(&run, &format!("solver pair {n} shapes"), ok, String::new());
        }
        let rows = metrics_rows(&dir.join(METRICS_FILE))?;
        let last = rows.last().and_then(|r| r.get(2)).and_then(|v| v.parse::<f64>().ok());
        let ok = rows.len() == row.iterations.unwrap_or(0) && last.is_some_and(|u| close(u, stored));
        t.record(&run, "metrics table", ok, format!("{} rows", rows.len()));
    }

    match m.kind {
        ExperimentKind::CongruentDataset | ExperimentKind::WinTrain => {
            let p = dir.join(SYSTEM_FILE);
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let desc: SystemDescriptor =
                serde_json::from_str(&text).map_err(|e| CliError::Missing(format!("{}: {e}", p.display())))?;
            let sys = CongruentSystem::from_descriptor(&desc)?;
            let alpha_ok = sys.alpha().iter().zip(&m.weights).all(|(a, b)| close(*a, *b));
            t.record(&run, "system weights", alpha_ok && sys.alpha().len() == m.weights.len(), format!("{:?}", sys.alpha()));
            t.reproduce(&run, &m.checks, &congruence_check(cfg, &sys)?);
        }
        ExperimentKind::InverseMaps => {
            let spec = make_scatter_population(m.dim, m.weights.len(), cfg.seed)?.with_weights(&m.weights)?;
            let g = load_net(dir, generator_checkpoint())?;
            let mut fwd = Vec::new();
            let mut inv = Vec::new();
            for n in 0..m.weights.len() {
                fwd.push(load_net(dir, &pair_checkpoints(n, "checkpoints").0)?);
                inv.push(load_net(dir, &pair_checkpoints(n, "inverse").0)?);
            }
            for c in inverse_checks(cfg, &spec, &g, &fwd, &inv)? {
                t.reproduce(&run, &m.checks, &c);
            }
        }
        ExperimentKind::LemmaChecks => {
            for c in lemma_suite(cfg)? {
                t.reproduce(&run, &m.checks, &c);
            }
        }
        _ => {}
    }
    Ok(())
}

/// Re-derives every stored score from checkpoints and descriptors. Returns
/// one line per check and the number of failures.
pub fn verify(dir: &Path) -> CliResult<(String, usize)> {
    let mut t = Tally {
        lines: Vec::new(),
        failed: 0,
    };
    for path in find_manifests(dir)? {
        verify_run(&path, &mut t)?;
    }
    Ok((t.lines.join("\n") + "\n", t.failed))
}
