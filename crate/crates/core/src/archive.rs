//! Grid archive with soft acceptance thresholds.
//!
//! The measure space is tessellated into a regular grid. Each cell holds at
//! most one elite and a threshold `t_e` which starts at `threshold_min` and is
//! annealed toward accepted objectives at rate `alpha`:
//!
//! ```text
//! accept  iff  f > t_e
//! t_e  <-  (1 - alpha) * t_e + alpha * f
//! ```
//!
//! With `alpha = 1` this is plain MAP-Elites.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{f32s_to_le_bytes, le_bytes_to_f32s, write_atomic};
use crate::seeding::Rng;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("measure vector has {got} entries, archive has {expected} dimensions")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite {what} rejected: {value}")]
    NonFinite { what: &'static str, value: f64 },
    #[error("archive is empty")]
    Empty,
    #[error("invalid archive spec: {0}")]
    InvalidSpec(String),
    #[error("cdf needs at least one bin")]
    NoBins,
    #[error("re-evaluation count must be at least 1")]
    NoReevaluations,
    #[error("evaluation of elite in cell {cell:?} failed: {source}")]
    Evaluation {
        cell: Vec<usize>,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("archive file {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveSpec {
    pub resolution: Vec<usize>,
    pub lower_bounds: Vec<f64>,
    pub upper_bounds: Vec<f64>,
    /// Archive learning rate in `[0, 1]`.
    pub alpha: f64,
    /// Threshold of a cell that has never accepted a solution.
    pub threshold_min: f64,
    /// Subtracted from every elite objective when computing the QD-score.
    #[serde(default)]
    pub score_offset: f64,
}

impl ArchiveSpec {
    pub fn validate(&self) -> Result<(), ArchiveError> {
        let k = self.resolution.len();
        let bad = |m: String| Err(ArchiveError::InvalidSpec(m));
        if k == 0 {
            return bad("resolution must have at least one dimension".into());
        }
        if self.lower_bounds.len() != k || self.upper_bounds.len() != k {
            return bad(format!(
                "bounds must have {k} entries (got {} lower, {} upper)",
                self.lower_bounds.len(),
                self.upper_bounds.len()
            ));
        }
        for i in 0..k {
            if self.resolution[i] == 0 {
                return bad(format!("resolution[{i}] must be >= 1"));
            }
            let (lo, hi) = (self.lower_bounds[i], self.upper_bounds[i]);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("bounds[{i}] must satisfy lower < upper, got [{lo}, {hi}]"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !self.threshold_min.is_finite() || !self.score_offset.is_finite() {
            return bad("threshold_min and score_offset must be finite".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        self.resolution.len()
    }

    pub fn num_cells(&self) -> usize {
        self.resolution.iter().product()
    }
}

/// A stored solution.
#[derive(Debug, Clone, PartialEq)]
pub struct Elite {
    pub params: Vec<f32>,
    pub objective: f64,
    pub measures: Vec<f64>,
    pub cell: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub threshold: f64,
    pub elite: Option<Elite>,
}

/// Outcome of one insertion attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Improvement {
    /// `objective - t_e` measured against the threshold before the update.
    /// Negative for rejected solutions.
    pub delta: f64,
    pub accepted: bool,
    /// The solution filled a previously empty cell.
    pub new_cell: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMetrics {
    pub qd_score: f64,
    pub coverage: f64,
    pub best_reward: Option<f64>,
    pub num_elites: usize,
}

#[derive(Debug, Clone)]
pub struct GridArchive {
    spec: ArchiveSpec,
    cells: Vec<CellState>,
    /// Flat indices of filled cells in the order they were first filled.
    visit_order: Vec<usize>,
}

impl GridArchive {
    pub fn new(spec: ArchiveSpec) -> Result<Self, ArchiveError> {
        spec.validate()?;
        let empty = CellState { threshold: spec.threshold_min, elite: None };
        Ok(Self {
            cells: vec![empty; spec.num_cells()],
            visit_order: Vec::new(),
            spec,
        })
    }

    pub fn spec(&self) -> &ArchiveSpec {
        &self.spec
    }

    pub fn dims(&self) -> usize {
        self.spec.dims()
    }

    pub fn len(&self) -> usize {
        self.visit_order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visit_order.is_empty()
    }

    /// Grid multi-index of a measure vector. Measures are clipped to the
    /// archive bounds first, and values on the upper bound land in the last cell.
    pub fn cell_index(&self, measures: &[f64]) -> Result<Vec<usize>, ArchiveError> {
        let k = self.dims();
        if measures.len() != k {
            return Err(ArchiveError::DimensionMismatch { expected: k, got: measures.len() });
        }
        Ok((0..k)
            .map(|i| {
                let (lo, hi) = (self.spec.lower_bounds[i], self.spec.upper_bounds[i]);
                let res = self.spec.resolution[i];
                let m = measures[i].clamp(lo, hi);
                let raw = ((m - lo) / (hi - lo) * res as f64).floor();
                (raw.max(0.0) as usize).min(res - 1)
            })
            .collect())
    }

    fn flat_index(&self, cell: &[usize]) -> usize {
        cell.iter()
            .zip(&self.spec.resolution)
            .fold(0, |acc, (&c, &r)| acc * r + c)
    }

    fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let mut cell = vec![0; self.dims()];
        for i in (0..self.dims()).rev() {
            let r = self.spec.resolution[i];
            cell[i] = flat % r;
            flat /= r;
        }
        cell
    }

    /// Cell state at a multi-index, if the index is inside the grid.
    pub fn cell(&self, cell: &[usize]) -> Option<&CellState> {
        if cell.len() != self.dims() || cell.iter().zip(&self.spec.resolution).any(|(c, r)| c >= r) {
            return None;
        }
        self.cells.get(self.flat_index(cell))
    }

    pub fn insert(
        &mut self,
        params: &[f32],
        objective: f64,
        measures: &[f64],
    ) -> Result<Improvement, ArchiveError> {
        if !objective.is_finite() {
            return Err(ArchiveError::NonFinite { what: "objective", value: objective });
        }
        if let Some(&m) = measures.iter().find(|m| !m.is_finite()) {
            return Err(ArchiveError::NonFinite { what: "measure", value: m });
        }
        let cell = self.cell_index(measures)?;
        let flat = self.flat_index(&cell);
        let alpha = self.spec.alpha;
        let state = &mut self.cells[flat];
        let old = state.threshold;
        let delta = objective - old;
        if objective <= old {
            return Ok(Improvement { delta, accepted: false, new_cell: false });
        }
        let new_cell = state.elite.is_none();
        state.elite = Some(Elite {
            params: params.to_vec(),
            objective,
            measures: measures.to_vec(),
            cell,
        });
        state.threshold = (1.0 - alpha) * old + alpha * objective;
        if new_cell {
            self.visit_order.push(flat);
        }
        Ok(Improvement { delta, accepted: true, new_cell })
    }

    /// Elites in first-visit order.
    pub fn elites(&self) -> impl Iterator<Item = &Elite> + '_ {
        self.visit_order
            .iter()
            .filter_map(move |&f| self.cells[f].elite.as_ref())
    }

    pub fn metrics(&self) -> ArchiveMetrics {
        let mut qd_score = 0.0;
        let mut best: Option<f64> = None;
        for e in self.elites() {
            qd_score += e.objective - self.spec.score_offset;
            // Strict comparison keeps the first-visited elite on ties.
            if best.is_none_or(|b| e.objective > b) {
                best = Some(e.objective);
            }
        }
        ArchiveMetrics {
            qd_score,
            coverage: self.len() as f64 / self.spec.num_cells() as f64,
            best_reward: best,
            num_elites: self.len(),
        }
    }

    /// Elite with the highest objective; ties go to the first-visited cell.
    pub fn best_elite(&self) -> Option<&Elite> {
        let mut best: Option<&Elite> = None;
        for e in self.elites() {
            if best.is_none_or(|b| e.objective > b.objective) {
                best = Some(e);
            }
        }
        best
    }

    /// Survival curve of elite objectives: `num_bins` thresholds evenly spaced
    /// over `[min, max]` objective, each paired with the fraction of elites at
    /// or above it.
    pub fn cdf(&self, num_bins: usize) -> Result<Vec<(f64, f64)>, ArchiveError> {
        if num_bins == 0 {
            return Err(ArchiveError::NoBins);
        }
        if self.is_empty() {
            return Err(ArchiveError::Empty);
        }
        let objectives: Vec<f64> = self.elites().map(|e| e.objective).collect();
        let lo = objectives.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = objectives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let n = objectives.len() as f64;
        Ok((0..num_bins)
            .map(|j| {
                let t = if num_bins == 1 || j == 0 {
                    lo
                } else if j == num_bins - 1 {
                    hi
                } else {
                    lo + (hi - lo) * j as f64 / (num_bins - 1) as f64
                };
                let above = objectives.iter().filter(|&&o| o >= t).count();
                (t, above as f64 / n)
            })
            .collect())
    }

    /// Uniformly random elite among filled cells.
    pub fn sample_elite(&self, rng: &mut Rng) -> Result<Elite, ArchiveError> {
        if self.is_empty() {
            return Err(ArchiveError::Empty);
        }
        let flat = self.visit_order[rng.random_range(0..self.visit_order.len())];
        Ok(self.cells[flat].elite.clone().expect("visited cell holds an elite"))
    }

    /// Rebuilds the archive from averaged re-evaluations of every elite.
    ///
    /// `evaluator(elite, repeat)` returns `(objective, measures)`. Averages are
    /// inserted into a fresh archive with `alpha = 1`, so each cell keeps the
    /// best corrected solution.
    pub fn corrected_archive<F, E>(&self, mut evaluator: F, n_reevals: usize) -> Result<GridArchive, ArchiveError>
    where
        F: FnMut(&Elite, usize) -> Result<(f64, Vec<f64>), E>,
        E: Into<Box<dyn std::error::Error + Send + Sync>>,
    {
        if n_reevals == 0 {
            return Err(ArchiveError::NoReevaluations);
        }
        let spec = ArchiveSpec { alpha: 1.0, ..self.spec.clone() };
        let mut corrected = GridArchive::new(spec)?;
        let k = self.dims();
        for elite in self.elites() {
            // Running means: exact when every re-evaluation returns the same value.
            let mut f_mean = 0.0;
            let mut m_mean = vec![0.0; k];
            for r in 0..n_reevals {
                let (f, m) = evaluator(elite, r).map_err(|e| ArchiveError::Evaluation {
                    cell: elite.cell.clone(),
                    source: e.into(),
                })?;
                if m.len() != k {
                    return Err(ArchiveError::DimensionMismatch { expected: k, got: m.len() });
                }
                let w = 1.0 / (r + 1) as f64;
                f_mean += (f - f_mean) * w;
                m_mean.iter_mut().zip(&m).for_each(|(s, v)| *s += (v - *s) * w);
            }
            corrected.insert(&elite.params, f_mean, &m_mean)?;
        }
        Ok(corrected)
    }

    /// Writes `<stem>.csv` (manifest), `<stem>.params` (little-endian f32
    /// parameter blob) and `<stem>.spec.json`.
    pub fn save(&self, stem: &Path) -> Result<(), ArchiveError> {
        let k = self.dims();
        let mut header: Vec<String> = (0..k).map(|i| format!("cell_index_{i}")).collect();
        header.push("threshold".into());
        header.push("objective".into());
        header.extend((0..k).map(|i| format!("measure_{i}")));
        header.push("param_offset".into());
        header.push("param_len".into());

        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(&header)?;
        let mut blob = Vec::new();
        for &flat in &self.visit_order {
            let state = &self.cells[flat];
            let elite = state.elite.as_ref().expect("visited cell holds an elite");
            let mut row: Vec<String> = elite.cell.iter().map(|c| c.to_string()).collect();
            row.push(state.threshold.to_string());
            row.push(elite.objective.to_string());
            row.extend(elite.measures.iter().map(|m| m.to_string()));
            row.push(blob.len().to_string());
            row.push(elite.params.len().to_string());
            blob.extend_from_slice(&elite.params);
            writer.write_record(&row)?;
        }
        let manifest = writer.into_inner().map_err(|e| e.into_error())?;
        write_atomic(&with_suffix(stem, "csv"), &manifest)?;
        write_atomic(&with_suffix(stem, "params"), &f32s_to_le_bytes(&blob))?;
        write_atomic(&with_suffix(stem, "spec.json"), &serde_json::to_vec_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<GridArchive, ArchiveError> {
        let spec_path = with_suffix(stem, "spec.json");
        let spec: ArchiveSpec = serde_json::from_slice(&std::fs::read(&spec_path)?)?;
        let mut archive = GridArchive::new(spec)?;
        let k = archive.dims();

        let params_path = with_suffix(stem, "params");
        let blob = le_bytes_to_f32s(&std::fs::read(&params_path)?).ok_or_else(|| ArchiveError::Format {
            path: params_path.clone(),
            message: "length is not a multiple of 4".into(),
        })?;

        let csv_path = with_suffix(stem, "csv");
        let fmt_err = |message: String| ArchiveError::Format { path: csv_path.clone(), message };
        let mut reader = csv::Reader::from_path(&csv_path)?;
        let width = reader.headers()?.len();
        if width != 2 * k + 4 {
            return Err(fmt_err(format!("expected {} columns, found {width}", 2 * k + 4)));
        }
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let num = |i: usize| -> Result<f64, ArchiveError> {
                record[i]
                    .parse::<f64>()
                    .map_err(|e| fmt_err(format!("row {line} column {i}: {e}")))
            };
            let int = |i: usize| -> Result<usize, ArchiveError> {
                record[i]
                    .parse::<usize>()
                    .map_err(|e| fmt_err(format!("row {line} column {i}: {e}")))
            };
            let cell = (0..k).map(int).collect::<Result<Vec<_>, _>>()?;
            let threshold = num(k)?;
            let objective = num(k + 1)?;
            let measures = (k + 2..2 * k + 2).map(num).collect::<Result<Vec<_>, _>>()?;
            let offset = int(2 * k + 2)?;
            let len = int(2 * k + 3)?;
            let params = blob
                .get(offset..offset + len)
                .ok_or_else(|| fmt_err(format!("row {line} parameter range out of bounds")))?
                .to_vec();
            if archive.cell(&cell).is_none() {
                return Err(fmt_err(format!("row {line} cell {cell:?} outside the grid")));
            }
            let flat = archive.flat_index(&cell);
            if archive.cells[flat].elite.is_some() {
                return Err(fmt_err(format!("row {line} duplicates cell {cell:?}")));
            }
            archive.cells[flat] = CellState {
                threshold,
                elite: Some(Elite { params, objective, measures, cell }),
            };
            archive.visit_order.push(flat);
        }
        Ok(archive)
    }

    /// Multi-indices of all filled cells in first-visit order.
    pub fn filled_cells(&self) -> Vec<Vec<usize>> {
        self.visit_order.iter().map(|&f| self.unflatten(f)).collect()
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
