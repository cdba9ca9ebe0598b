use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SkinType;

fn check_pair(gold: &[f64], est: &[f64]) -> Result<()> {
    if gold.is_empty() || gold.len() != est.len() {
        return Err(Error::invalid(format!(
            "need equal non-empty lengths, got {} and {}",
            gold.len(),
            est.len()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(gold: &[f64], est: &[f64]) -> Result<f64> {
    check_pair(gold, est)?;
    let s: f64 = gold.iter().zip(est).map(|(g, e)| (g - e).abs()).sum();
    Ok(s / gold.len() as f64)
}

/// Root mean squared error.
pub fn rmse(gold: &[f64], est: &[f64]) -> Result<f64> {
    check_pair(gold, est)?;
    let s: f64 = gold.iter().zip(est).map(|(g, e)| (g - e) * (g - e)).sum();
    Ok((s / gold.len() as f64).sqrt())
}

/// Pearson correlation; undefined when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::Undefined("correlation of a constant series".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// One evaluation window of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrWindow {
    pub subject: String,
    pub skin_type: Option<SkinType>,
    pub index: usize,
    /// First frame (inclusive) in subject frame coordinates.
    pub start: usize,
    /// Last frame (exclusive).
    pub end: usize,
    pub gold_hr: f64,
    pub est_hr: f64,
    pub snr: f64,
}

/// Aggregates over a set of windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub windows: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `None` when undefined (fewer than two windows or constant series).
    pub pearson: Option<f64>,
    pub mean_snr: f64,
}

impl Aggregate {
    pub fn from_windows<'a>(windows: impl IntoIterator<Item = &'a HrWindow>) -> Result<Self> {
        let ws: Vec<&HrWindow> = windows.into_iter().collect();
        let gold: Vec<f64> = ws.iter().map(|w| w.gold_hr).collect();
        let est: Vec<f64> = ws.iter().map(|w| w.est_hr).collect();
        Ok(Aggregate {
            windows: ws.len(),
            mae: mae(&gold, &est)?,
            rmse: rmse(&gold, &est)?,
            pearson: pearson(&gold, &est).ok(),
            mean_snr: ws.iter().map(|w| w.snr).sum::<f64>() / ws.len() as f64,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(skip)]
    pub windows: Vec<HrWindow>,
    pub overall: Aggregate,
    pub by_skin_type: BTreeMap<SkinType, Aggregate>,
}

impl MetricsReport {
    pub fn from_windows(windows: Vec<HrWindow>) -> Result<Self> {
        let overall = Aggregate::from_windows(&windows)?;
        let mut by_skin_type = BTreeMap::new();
        for t in SkinType::ALL {
            let sub: Vec<&HrWindow> = windows.iter().filter(|w| w.skin_type == Some(t)).collect();
            if !sub.is_empty() {
                by_skin_type.insert(t, Aggregate::from_windows(sub)?);
            }
        }
        Ok(MetricsReport {
            windows,
            overall,
            by_skin_type,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_windows_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for win in &self.windows {
            w.serialize(win).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_windows_csv(path: &Path) -> Result<Vec<HrWindow>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        r.deserialize()
            .map(|row| row.map_err(|e| csv_err(path, e)))
            .collect()
    }

    /// Columns `subject,mean,diff` with `mean = (gold+est)/2`, `diff = est-gold`.
    pub fn write_bland_altman_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            subject: &'a str,
            mean: f64,
            diff: f64,
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        for win in &self.windows {
            w.serialize(Row {
                subject: &win.subject,
                mean: (win.gold_hr + win.est_hr) / 2.0,
                diff: win.est_hr - win.gold_hr,
            })
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}
