use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ppga::archive::{ArchiveMetrics, GridArchive};
use ppga::checkpoint;
use ppga::io::write_atomic;
use ppga::ppga::{IterationReport, Ppga, RunConfig};
use ppga::seeding::{derive_seed, stream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::to_toml;
use crate::metrics::{csv_err, read_reports, write_metrics, write_reports};
use crate::HarnessError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORTS_FILE: &str = "iterations.jsonl";
pub const CONFIG_FILE: &str = "config_effective.toml";
pub const ARCHIVE_STEM: &str = "archive_final";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub metrics: ArchiveMetrics,
    pub restarts: usize,
}

impl std::fmt::Display for RunSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let best = self.metrics.best_reward.map_or("none".to_string(), |b| format!("{b:.4}"));
        write!(
            f,
            "iterations {} qd_score {:.4} coverage {:.4} best_reward {} elites {} restarts {}",
            self.iterations, self.metrics.qd_score, self.metrics.coverage, best, self.metrics.num_elites, self.restarts
        )
    }
}

fn same_run(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| RunConfig { iterations: 0, checkpoint_every: 0, ..c.clone() };
    strip(a) == strip(b)
}

fn save_state(ppga: &Ppga, out: &Path, reports: &[IterationReport]) -> Result<(), HarnessError> {
    checkpoint::save(ppga, &out.join(CHECKPOINT_DIR))?;
    write_reports(&out.join(REPORTS_FILE), reports)?;
    Ok(())
}

/// Runs `config` into `out`, writing metrics, iteration reports, periodic
/// and final checkpoints, the final archive and the effective config.
///
/// With `resume`, continues from the latest checkpoint in `out` if one exists.
pub fn run(config: &RunConfig, out: &Path, resume: bool) -> Result<RunSummary, HarnessError> {
    std::fs::create_dir_all(out)?;
    let ckpt_root = out.join(CHECKPOINT_DIR);
    let (mut ppga, mut reports) = match checkpoint::latest(&ckpt_root).filter(|_| resume) {
        Some(dir) => {
            let mut ppga = checkpoint::load(&dir)?;
            if !same_run(&ppga.config, config) {
                return Err(HarnessError::Config(format!(
                    "{} was written by a different run config",
                    dir.display()
                )));
            }
            ppga.config.iterations = config.iterations;
            ppga.config.checkpoint_every = config.checkpoint_every;
            let mut reports = read_reports(&out.join(REPORTS_FILE))?;
            if reports.len() < ppga.iteration {
                return Err(HarnessError::Runtime(format!(
                    "{REPORTS_FILE} has {} iterations but the checkpoint is at {}",
                    reports.len(),
                    ppga.iteration
                )));
            }
            reports.truncate(ppga.iteration);
            log::info!("resuming from {} at iteration {}", dir.display(), ppga.iteration);
            (ppga, reports)
        }
        None => (Ppga::new(config.clone())?, Vec::new()),
    };
    write_atomic(&out.join(CONFIG_FILE), to_toml(&ppga.config).as_bytes())?;
    write_metrics(&out.join(METRICS_FILE), &reports)?;

    let every = ppga.config.checkpoint_every;
    ppga.run_with(|state, report| {
        log::info!(
            "iter {} f {:.3} insertions {} qd {:.3} coverage {:.4} sigma {:.4}{}",
            report.iteration,
            report.objective,
            report.insertions,
            report.metrics.qd_score,
            report.metrics.coverage,
            report.sigma,
            if report.restarted { " restart" } else { "" }
        );
        reports.push(report.clone());
        write_metrics(&out.join(METRICS_FILE), &reports)?;
        if every > 0 && state.iteration % every == 0 {
            save_state(state, out, &reports)?;
        }
        Ok::<_, HarnessError>(())
    })?;

    save_state(&ppga, out, &reports)?;
    ppga.archive.save(&out.join(ARCHIVE_STEM))?;
    Ok(RunSummary {
        iterations: ppga.iteration,
        metrics: ppga.archive.metrics(),
        restarts: reports.iter().filter(|r| r.restarted).count(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub n_reevals: usize,
    pub original: ArchiveMetrics,
    pub corrected: ArchiveMetrics,
}

/// Re-evaluates every elite of the archive at `stem` `n_reevals` times (one
/// episode each) and rebuilds the archive from the averages. Writes
/// `archive_corrected.*` and `corrected_metrics.json` into `out`.
pub fn correct(
    stem: &Path,
    config: &RunConfig,
    n_reevals: usize,
    seed: u64,
    out: &Path,
) -> Result<(GridArchive, CorrectionSummary), HarnessError> {
    let archive = GridArchive::load(stem)?;
    let spec = archive.spec();
    if spec.resolution != config.archive.resolution
        || spec.lower_bounds != config.archive.lower_bounds
        || spec.upper_bounds != config.archive.upper_bounds
    {
        return Err(HarnessError::Config(format!(
            "archive {} does not match the environment's archive spec",
            stem.display()
        )));
    }
    let ppga = Ppga::new(config.clone())?;
    let expected = ppga.search.len();
    if let Some(e) = archive.elites().find(|e| e.params.len() != expected) {
        return Err(HarnessError::Config(format!(
            "elite in cell {:?} has {} parameters but the environment's policies have {expected}",
            e.cell,
            e.params.len()
        )));
    }
    let domain = &ppga.domain;
    let elites: Vec<_> = archive.elites().collect();
    let evaluated = elites
        .par_iter()
        .map(|e| {
            let evals = (0..n_reevals)
                .map(|r| {
                    let mut tags = vec![stream::CORRECTION];
                    tags.extend(e.cell.iter().map(|&c| c as u64));
                    tags.push(r as u64);
                    domain.evaluate(&e.params, 1, derive_seed(seed, &tags))
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((e.cell.clone(), evals))
        })
        .collect::<Result<HashMap<_, _>, ppga::ppga::PpgaError>>()?;
    let corrected = archive.corrected_archive(
        |e, r| Ok::<_, std::convert::Infallible>(evaluated[&e.cell][r].clone()),
        n_reevals,
    )?;
    let summary = CorrectionSummary { n_reevals, original: archive.metrics(), corrected: corrected.metrics() };
    std::fs::create_dir_all(out)?;
    corrected.save(&out.join("archive_corrected"))?;
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    write_atomic(&out.join("corrected_metrics.json"), &json)?;
    Ok((corrected, summary))
}

/// CSV with header `threshold,fraction`.
pub fn cdf_csv(archive: &GridArchive, num_bins: usize) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["threshold", "fraction"]).map_err(csv_err)?;
    for (t, frac) in archive.cdf(num_bins)? {
        w.serialize((t, frac)).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Runtime(e.to_string()))
}

/// Writes the CDF of the archive at `stem` to `out`, or to stdout without one.
pub fn export_cdf(stem: &Path, num_bins: usize, out: Option<&Path>) -> Result<(), HarnessError> {
    let bytes = cdf_csv(&GridArchive::load(stem)?, num_bins)?;
    match out {
        Some(path) => write_atomic(path, &bytes)?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inspection {
    pub archive: PathBuf,
    pub cells: usize,
    pub metrics: ArchiveMetrics,
}

pub fn inspect(stem: &Path) -> Result<Inspection, HarnessError> {
    let archive = GridArchive::load(stem)?;
    Ok(Inspection { archive: stem.to_path_buf(), cells: archive.spec().num_cells(), metrics: archive.metrics() })
}
