use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigproc::{csv_err, Aggregate, MetricsReport};

use super::experiment::{Mode, METRICS_JSON, RUN_MANIFEST, WINDOWS_CSV};

pub const SUMMARY_CSV: &str = "summary.csv";

#[derive(Serialize)]
struct SkinRow<'a> {
    skin_type: &'a str,
    windows: usize,
    mae: f64,
    rmse: f64,
    pearson: Option<f64>,
    mean_snr: f64,
}

pub(crate) fn write_skin_type_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (t, a) in &report.by_skin_type {
        w.serialize(SkinRow {
            skin_type: t.label(),
            windows: a.windows,
            mae: a.mae,
            rmse: a.rmse,
            pearson: a.pearson,
            mean_snr: a.mean_snr,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One run directory, with aggregates recomputed from its window CSV.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub mode: Option<Mode>,
    pub report: MetricsReport,
    /// Aggregates as stored in the metrics JSON.
    pub stored: MetricsReport,
}

#[derive(Deserialize)]
struct ManifestMode {
    mode: Mode,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let missing: Vec<&str> = [METRICS_JSON, WINDOWS_CSV]
            .into_iter()
            .filter(|f| !dir.join(f).is_file())
            .collect();
        if !missing.is_empty() {
            return Err(Error::format(dir, format!("missing run artifacts: {}", missing.join(", "))));
        }
        let metrics = dir.join(METRICS_JSON);
        let text = std::fs::read_to_string(&metrics).map_err(|e| Error::io(&metrics, e))?;
        let stored: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::format(&metrics, e.to_string()))?;
        let report = MetricsReport::from_windows(MetricsReport::read_windows_csv(&dir.join(WINDOWS_CSV))?)?;
        let manifest = dir.join(RUN_MANIFEST);
        let mode = std::fs::read_to_string(&manifest)
            .ok()
            .and_then(|t| serde_json::from_str::<ManifestMode>(&t).ok())
            .map(|m| m.mode);
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            mode,
            report,
            stored,
        })
    }

    pub fn label(&self) -> String {
        match self.mode {
            Some(m) => m.to_string(),
            None => self.dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
        }
    }

    /// Largest relative gap between stored and recomputed aggregates.
    pub fn consistency_error(&self) -> f64 {
        let mut worst = rel(self.stored.overall.mae, self.report.overall.mae)
            .max(rel(self.stored.overall.rmse, self.report.overall.rmse))
            .max(rel(self.stored.overall.mean_snr, self.report.overall.mean_snr));
        if self.stored.overall.windows != self.report.overall.windows {
            worst = f64::INFINITY;
        }
        worst
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// A single run directory, or every run directory directly below `dir`.
pub fn find_runs(dir: &Path) -> Result<Vec<RunSummary>> {
    if dir.join(METRICS_JSON).is_file() {
        return Ok(vec![RunSummary::load(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let mut runs = Vec::new();
    let mut problems = Vec::new();
    for d in subdirs {
        match RunSummary::load(&d) {
            Ok(r) => runs.push(r),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if runs.is_empty() {
        let detail = if problems.is_empty() {
            "no run directories".to_string()
        } else {
            problems.join("; ")
        };
        return Err(Error::format(dir, detail));
    }
    for p in problems {
        log::warn!("skipped {p}");
    }
    Ok(runs)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn row(out: &mut String, label: &str, group: &str, a: &Aggregate) {
    let _ = writeln!(
        out,
        "{label:<16} {group:<8} {:>7} {:>8.3} {:>8.3} {:>7} {:>8.2}",
        a.windows,
        a.mae,
        a.rmse,
        fmt_opt(a.pearson),
        a.mean_snr
    );
}

/// Plain-text table of MAE/RMSE/Pearson/SNR per run and skin type.
pub fn render_summary(runs: &[RunSummary]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:<8} {:>7} {:>8} {:>8} {:>7} {:>8}",
        "mode", "skin", "windows", "MAE", "RMSE", "r", "SNR dB"
    );
    for r in runs {
        let label = r.label();
        row(&mut out, &label, "all", &r.report.overall);
        for (t, a) in &r.report.by_skin_type {
            row(&mut out, &label, t.label(), a);
        }
    }
    out
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    run: &'a str,
    skin_type: &'a str,
    windows: usize,
    mae: f64,
    rmse: f64,
    pearson: Option<f64>,
    mean_snr: f64,
}

pub fn write_summary_csv(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in runs {
        let label = r.label();
        let groups = std::iter::once(("all", &r.report.overall))
            .chain(r.report.by_skin_type.iter().map(|(t, a)| (t.label(), a)));
        for (g, a) in groups {
            w.serialize(SummaryRow {
                run: &label,
                skin_type: g,
                windows: a.windows,
                mae: a.mae,
                rmse: a.rmse,
                pearson: a.pearson,
                mean_snr: a.mean_snr,
            })
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary of `dir` (a run or a directory of runs); also writes
/// `summary.csv` there.
pub fn report(dir: &Path) -> Result<String> {
    let runs = find_runs(dir)?;
    for r in &runs {
        let e = r.consistency_error();
        if e > 1e-9 {
            return Err(Error::format(
                &r.dir,
                format!("stored metrics disagree with windows.csv (relative gap {e:e})"),
            ));
        }
    }
    write_summary_csv(&dir.join(SUMMARY_CSV), &runs)?;
    Ok(render_summary(&runs))
}

/// Per-run deltas (`b - a`) for runs present in both, matched by label.
pub fn compare(a: &Path, b: &Path) -> Result<String> {
    let (ra, rb) = (find_runs(a)?, find_runs(b)?);
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>9} {:>9} {:>9}", "mode", "dMAE", "dRMSE", "dSNR");
    let mut matched = 0;
    for x in &ra {
        let Some(y) = rb.iter().find(|y| y.label() == x.label()) else {
            continue;
        };
        matched += 1;
        let (p, q) = (&x.report.overall, &y.report.overall);
        let _ = writeln!(
            out,
            "{:<16} {:>+9.3} {:>+9.3} {:>+9.2}",
            x.label(),
            q.mae - p.mae,
            q.rmse - p.rmse,
            q.mean_snr - p.mean_snr
        );
    }
    if matched == 0 {
        return Err(Error::invalid("the two directories share no run"));
    }
    Ok(out)
}
