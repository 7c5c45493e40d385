//! Grid sweeps over `(N1, N2)` and seeds. Each run gets its own directory
//! `n1_<a>_n2_<b>/seed_<s>`; a run whose `summary.json` records success is
//! not recomputed.

use std::path::{Path, PathBuf};

use ppga::io::write_atomic;
use ppga::ppga::RunConfig;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commands::{self, RunSummary};
use crate::metrics::csv_err;
use crate::HarnessError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "sweep_summary.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Ok(RunSummary),
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for fewer than two values.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Stat { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub n1: usize,
    pub n2: usize,
    pub runs: Vec<(u64, RunOutcome)>,
    pub qd_score: Option<Stat>,
    pub coverage: Option<Stat>,
    pub best_reward: Option<Stat>,
}

impl CellSummary {
    fn new(n1: usize, n2: usize, runs: Vec<(u64, RunOutcome)>) -> Self {
        let ok: Vec<&RunSummary> = runs
            .iter()
            .filter_map(|(_, o)| match o {
                RunOutcome::Ok(s) => Some(s),
                RunOutcome::Failed(_) => None,
            })
            .collect();
        let qd: Vec<f64> = ok.iter().map(|s| s.metrics.qd_score).collect();
        let cov: Vec<f64> = ok.iter().map(|s| s.metrics.coverage).collect();
        let best: Vec<f64> = ok.iter().filter_map(|s| s.metrics.best_reward).collect();
        Self { n1, n2, qd_score: Stat::of(&qd), coverage: Stat::of(&cov), best_reward: Stat::of(&best), runs }
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|(_, o)| matches!(o, RunOutcome::Failed(_))).count()
    }
}

pub fn run_dir(out: &Path, n1: usize, n2: usize, seed: u64) -> PathBuf {
    out.join(format!("n1_{n1}_n2_{n2}")).join(format!("seed_{seed}"))
}

fn cached(dir: &Path) -> Option<RunSummary> {
    let bytes = std::fs::read(dir.join(SUMMARY_FILE)).ok()?;
    match serde_json::from_slice(&bytes).ok()? {
        RunOutcome::Ok(s) => Some(s),
        RunOutcome::Failed(_) => None,
    }
}

fn run_one(base: &RunConfig, out: &Path, n1: usize, n2: usize, seed: u64) -> Result<RunOutcome, HarnessError> {
    let dir = run_dir(out, n1, n2, seed);
    if let Some(s) = cached(&dir) {
        log::info!("n1 {n1} n2 {n2} seed {seed}: cached");
        return Ok(RunOutcome::Ok(s));
    }
    let config = RunConfig { n1, n2, seed, ..base.clone() };
    let outcome = match commands::run(&config, &dir, false) {
        Ok(s) => RunOutcome::Ok(s),
        Err(e) => {
            log::error!("n1 {n1} n2 {n2} seed {seed}: {e}");
            RunOutcome::Failed(e.to_string())
        }
    };
    let json = serde_json::to_vec_pretty(&outcome).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    if let Err(e) = std::fs::create_dir_all(&dir).and_then(|_| write_atomic(&dir.join(SUMMARY_FILE), &json)) {
        log::warn!("cannot record the outcome of n1 {n1} n2 {n2} seed {seed}: {e}");
    }
    Ok(outcome)
}

/// Runs every `(n1, n2)` pair for every seed and writes `sweep_summary.csv`.
/// `workers > 1` runs that many cells concurrently.
pub fn sweep(
    base: &RunConfig,
    pairs: &[(usize, usize)],
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<Vec<CellSummary>, HarnessError> {
    if pairs.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one (n1, n2) pair and one seed".into()));
    }
    for &(n1, n2) in pairs {
        RunConfig { n1, n2, ..base.clone() }
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let jobs: Vec<(usize, usize, u64)> =
        pairs.iter().flat_map(|&(a, b)| seeds.iter().map(move |&s| (a, b, s))).collect();
    let outcomes: Vec<RunOutcome> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Runtime(e.to_string()))?;
        pool.install(|| jobs.par_iter().map(|&(a, b, s)| run_one(base, out, a, b, s)).collect::<Result<_, _>>())?
    } else {
        jobs.iter().map(|&(a, b, s)| run_one(base, out, a, b, s)).collect::<Result<_, _>>()?
    };

    let mut cells = Vec::with_capacity(pairs.len());
    let mut it = outcomes.into_iter();
    for &(n1, n2) in pairs {
        let runs = seeds.iter().map(|&s| (s, it.next().unwrap())).collect();
        cells.push(CellSummary::new(n1, n2, runs));
    }
    write_table(&out.join(TABLE_FILE), &cells)?;
    Ok(cells)
}

pub fn write_table(path: &Path, cells: &[CellSummary]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "n1",
        "n2",
        "runs",
        "failures",
        "qd_score_mean",
        "qd_score_std",
        "coverage_mean",
        "coverage_std",
        "best_reward_mean",
        "best_reward_std",
    ])
    .map_err(csv_err)?;
    let fmt = |s: Option<Stat>| match s {
        Some(s) => [s.mean.to_string(), s.std.to_string()],
        None => [String::new(), String::new()],
    };
    for c in cells {
        let mut row = vec![c.n1.to_string(), c.n2.to_string(), c.runs.len().to_string(), c.failures().to_string()];
        row.extend(fmt(c.qd_score));
        row.extend(fmt(c.coverage));
        row.extend(fmt(c.best_reward));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_uses_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
