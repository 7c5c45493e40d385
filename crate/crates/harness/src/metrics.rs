use std::path::Path;

use ppga::io::write_atomic;
use ppga::ppga::IterationReport;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub qd_score: f64,
    pub coverage: f64,
    pub best_reward: Option<f64>,
    pub num_insertions: usize,
    pub xnes_sigma: f64,
    pub search_policy_f: f64,
    pub wall_time_seconds: f64,
}

impl From<&IterationReport> for MetricsRow {
    fn from(r: &IterationReport) -> Self {
        Self {
            iteration: r.iteration,
            qd_score: r.metrics.qd_score,
            coverage: r.metrics.coverage,
            best_reward: r.metrics.best_reward,
            num_insertions: r.insertions,
            xnes_sigma: r.sigma,
            search_policy_f: r.objective,
            wall_time_seconds: r.wall_time,
        }
    }
}

pub fn write_metrics(path: &Path, reports: &[IterationReport]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if reports.is_empty() {
        w.write_record([
            "iteration",
            "qd_score",
            "coverage",
            "best_reward",
            "num_insertions",
            "xnes_sigma",
            "search_policy_f",
            "wall_time_seconds",
        ])
        .map_err(csv_err)?;
    }
    for r in reports {
        w.serialize(MetricsRow::from(r)).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<_, _>>().map_err(csv_err)
}

/// Full iteration reports, one JSON object per line.
pub fn write_reports(path: &Path, reports: &[IterationReport]) -> Result<(), HarnessError> {
    let mut out = Vec::new();
    for r in reports {
        serde_json::to_writer(&mut out, r).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<IterationReport>, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display()))))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Runtime(e.to_string())
}
