use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppga_harness::commands::{self, ARCHIVE_STEM, CONFIG_FILE};
use ppga_harness::config::{self, ConfigSources, Preset};
use ppga_harness::sweep;
use ppga_harness::HarnessError;

#[derive(Parser)]
#[command(name = "ppga", version, about = "Quality-diversity RL runs, sweeps and archive tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Environment preset: `pointhopper<k>` or `sphere`.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero wall-clock fields so same-seed outputs are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

impl ConfigArgs {
    fn sources(&self) -> ConfigSources<'_> {
        ConfigSources {
            preset: self.preset,
            env: self.env.as_deref(),
            file: self.config.as_deref(),
            overrides: &self.overrides,
            seed: self.seed,
            deterministic: self.deterministic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a search and write metrics, checkpoints and the final archive.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Re-evaluate every elite and rebuild the archive from the averages.
    Correct {
        /// Archive stem, manifest file, or run directory.
        archive: PathBuf,
        /// Run config; defaults to the config saved next to the archive.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 50)]
        n_reevals: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; defaults to the archive's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the fraction of elites above evenly spaced objective thresholds.
    ExportCdf {
        archive: PathBuf,
        #[arg(long, default_value_t = 100)]
        bins: usize,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (N1, N2) pair over several seeds.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `N1:N2` pair; repeatable.
        #[arg(long = "pair", value_parser = parse_pair, default_values = ["10:5", "5:10", "5:5", "1:1", "10:10"])]
        pairs: Vec<(usize, usize)>,
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Print archive metrics as JSON.
    Inspect { archive: PathBuf },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("`{s}` is not N1:N2"))?;
    Ok((a.trim().parse().map_err(|e| format!("{a}: {e}"))?, b.trim().parse().map_err(|e| format!("{b}: {e}"))?))
}

/// Accepts an archive stem, one of its files, or a run directory.
fn archive_stem(path: &Path) -> PathBuf {
    if path.is_dir() {
        return path.join(ARCHIVE_STEM);
    }
    let s = path.to_string_lossy();
    for suffix in [".spec.json", ".csv", ".params"] {
        if let Some(stem) = s.strip_suffix(suffix) {
            return PathBuf::from(stem);
        }
    }
    path.to_path_buf()
}

fn parent_dir(stem: &Path) -> PathBuf {
    match stem.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, out, resume } => {
            let cfg = config::resolve(&config.sources())?;
            let summary = commands::run(&cfg, &out, resume)?;
            println!("{summary}");
        }
        Command::Correct { archive, config, overrides, n_reevals, seed, out } => {
            let stem = archive_stem(&archive);
            let dir = parent_dir(&stem);
            let file = config.unwrap_or_else(|| dir.join(CONFIG_FILE));
            let sources = ConfigSources { file: Some(&file), overrides: &overrides, ..Default::default() };
            let cfg = config::resolve(&sources)?;
            let (_, summary) = commands::correct(&stem, &cfg, n_reevals, seed, out.as_deref().unwrap_or(&dir))?;
            println!(
                "corrected qd_score {:.4} coverage {:.4} best_reward {} (original qd_score {:.4} coverage {:.4})",
                summary.corrected.qd_score,
                summary.corrected.coverage,
                summary.corrected.best_reward.map_or("none".into(), |b| format!("{b:.4}")),
                summary.original.qd_score,
                summary.original.coverage
            );
        }
        Command::ExportCdf { archive, bins, out } => {
            commands::export_cdf(&archive_stem(&archive), bins, out.as_deref())?;
        }
        Command::Sweep { config, pairs, seeds, workers, out } => {
            let cfg = config::resolve(&config.sources())?;
            let cells = sweep::sweep(&cfg, &pairs, &seeds, &out, workers)?;
            for c in &cells {
                let qd = c.qd_score.map_or("n/a".into(), |s| format!("{:.4} +- {:.4}", s.mean, s.std));
                println!("n1 {} n2 {}: qd_score {qd} failures {}", c.n1, c.n2, c.failures());
            }
        }
        Command::Inspect { archive } => {
            let report = commands::inspect(&archive_stem(&archive))?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| HarnessError::Runtime(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var("QD_ARBOR_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("cannot size the worker pool: {e}");
                }
            }
            _ => {
                eprintln!("error: QD_ARBOR_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
