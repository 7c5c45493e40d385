//! Resumable snapshots of a run.
//!
//! A checkpoint is a directory `iter_<n>` holding `meta.json` (iteration and
//! run config), the archive files, the coefficient distribution, the search
//! solution and, for RL runs, every critic, reward normalizer and the shared
//! observation statistics. The directory is assembled under a temporary name
//! and renamed into place.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::GridArchive;
use crate::io::{f32s_to_le_bytes, f64s_to_le_bytes, le_bytes_to_f32s, le_bytes_to_f64s, write_atomic};
use crate::nn::{RewardNormalizer, RunningNormalizer};
use crate::ppga::{Domain, Ppga, PpgaError, RunConfig};
use crate::vppo::ChannelLearner;
use crate::xnes::NesState;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    iteration: usize,
    config: RunConfig,
}

fn err(path: &Path, message: impl Into<String>) -> PpgaError {
    PpgaError::Checkpoint { path: path.to_path_buf(), message: message.into() }
}

fn read(path: &Path) -> Result<Vec<u8>, PpgaError> {
    std::fs::read(path).map_err(|e| err(path, e.to_string()))
}

fn read_f32s(path: &Path) -> Result<Vec<f32>, PpgaError> {
    le_bytes_to_f32s(&read(path)?).ok_or_else(|| err(path, "length is not a multiple of 4"))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>, PpgaError> {
    le_bytes_to_f64s(&read(path)?).ok_or_else(|| err(path, "length is not a multiple of 8"))
}

fn write_learner(dir: &Path, name: &str, learner: &ChannelLearner) -> std::io::Result<()> {
    write_atomic(&dir.join(format!("{name}_critic.bin")), &f32s_to_le_bytes(&learner.critic.get_flat()))?;
    write_atomic(&dir.join(format!("{name}_reward_norm.bin")), &f64s_to_le_bytes(&learner.reward_norm.to_vec()))
}

fn read_learner(dir: &Path, name: &str, learner: &mut ChannelLearner) -> Result<(), PpgaError> {
    let path = dir.join(format!("{name}_critic.bin"));
    learner.critic.set_flat(&read_f32s(&path)?).map_err(|e| err(&path, e.to_string()))?;
    let path = dir.join(format!("{name}_reward_norm.bin"));
    learner.reward_norm = RewardNormalizer::from_slice(&read_f64s(&path)?).ok_or_else(|| err(&path, "truncated"))?;
    Ok(())
}

/// Directory of the checkpoint taken after `iteration` completed iterations.
pub fn checkpoint_dir(root: &Path, iteration: usize) -> PathBuf {
    root.join(format!("iter_{iteration}"))
}

/// Writes a checkpoint of `ppga` under `root` and returns its directory.
pub fn save(ppga: &Ppga, root: &Path) -> Result<PathBuf, PpgaError> {
    let target = checkpoint_dir(root, ppga.iteration);
    let tmp = root.join(format!("iter_{}.tmp", ppga.iteration));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;

    let meta = Meta { iteration: ppga.iteration, config: ppga.config.clone() };
    write_atomic(&tmp.join("meta.json"), &serde_json::to_vec_pretty(&meta).map_err(|e| err(&tmp, e.to_string()))?)?;
    ppga.archive.save(&tmp.join("archive"))?;
    write_atomic(&tmp.join("nes.bin"), &ppga.nes.to_le_bytes())?;
    write_atomic(&tmp.join("search.bin"), &f32s_to_le_bytes(&ppga.search))?;
    if let Domain::Rl(rl) = &ppga.domain {
        for (i, learner) in rl.vppo.channels.iter().enumerate() {
            write_learner(&tmp, &format!("channel_{i}"), learner)?;
        }
        write_learner(&tmp, "walker", &rl.vppo.walker)?;
        let stats = &rl.vppo.obs_stats;
        let mut v = vec![stats.count];
        v.extend(&stats.mean);
        v.extend(&stats.var);
        write_atomic(&tmp.join("obs_stats.bin"), &f64s_to_le_bytes(&v))?;
    }

    if target.exists() {
        std::fs::remove_dir_all(&target)?;
    }
    std::fs::rename(&tmp, &target)?;
    Ok(target)
}

/// Restores the run state stored in `dir`.
pub fn load(dir: &Path) -> Result<Ppga, PpgaError> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_slice(&read(&meta_path)?).map_err(|e| err(&meta_path, e.to_string()))?;
    let mut ppga = Ppga::new(meta.config)?;
    ppga.iteration = meta.iteration;

    let archive = GridArchive::load(&dir.join("archive"))?;
    if archive.spec() != &ppga.config.archive {
        return Err(err(dir, "archive spec differs from the stored run config"));
    }
    ppga.archive = archive;

    let path = dir.join("nes.bin");
    let nes = NesState::from_le_bytes(&read(&path)?).ok_or_else(|| err(&path, "malformed coefficient state"))?;
    if nes.dim() != ppga.nes.dim() {
        return Err(err(&path, format!("dimension {} but the run needs {}", nes.dim(), ppga.nes.dim())));
    }
    ppga.nes = nes;

    let path = dir.join("search.bin");
    let search = read_f32s(&path)?;
    if search.len() != ppga.search.len() {
        return Err(err(&path, format!("{} values, expected {}", search.len(), ppga.search.len())));
    }
    ppga.search = search;

    if let Domain::Rl(rl) = &mut ppga.domain {
        for (i, learner) in rl.vppo.channels.iter_mut().enumerate() {
            read_learner(dir, &format!("channel_{i}"), learner)?;
        }
        read_learner(dir, "walker", &mut rl.vppo.walker)?;
        let path = dir.join("obs_stats.bin");
        let v = read_f64s(&path)?;
        let d = rl.vppo.obs_stats.dim();
        if v.len() != 1 + 2 * d {
            return Err(err(&path, format!("{} values, expected {}", v.len(), 1 + 2 * d)));
        }
        rl.vppo.obs_stats = RunningNormalizer { count: v[0], mean: v[1..1 + d].to_vec(), var: v[1 + d..].to_vec() };
    }
    Ok(ppga)
}

/// Most recent complete checkpoint under `root`, if any.
pub fn latest(root: &Path) -> Option<PathBuf> {
    let entries = std::fs::read_dir(root).ok()?;
    entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("iter_")?.parse().ok()?;
            e.path().join("meta.json").is_file().then(|| (n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::ArchiveSpec;
    use crate::ppga::{AnalyticConfig, EnvSpec, WalkMode};

    fn config() -> RunConfig {
        let archive = ArchiveSpec {
            resolution: vec![10, 10],
            lower_bounds: vec![0.0, 0.0],
            upper_bounds: vec![1.0, 1.0],
            alpha: 0.1,
            threshold_min: -10.0,
            score_offset: -10.0,
        };
        let env = EnvSpec::Analytic(AnalyticConfig { dim: 10, ..AnalyticConfig::default() });
        RunConfig {
            iterations: 12,
            lambda: 6,
            walk_mode: WalkMode::WeightedRecombination,
            deterministic: true,
            ..RunConfig::desk(archive, env)
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut full = Ppga::new(config()).unwrap();
        let mut reports = Vec::new();
        for _ in 0..12 {
            reports.push(full.step().unwrap());
            if full.iteration == 5 {
                save(&full, dir.path()).unwrap();
            }
        }
        let mut resumed = load(&latest(dir.path()).unwrap()).unwrap();
        assert_eq!(resumed.iteration, 5);
        for expected in &reports[5..] {
            assert_eq!(&resumed.step().unwrap(), expected);
        }
        assert_eq!(resumed.search, full.search);
        assert_eq!(resumed.nes, full.nes);
        assert_eq!(resumed.archive.metrics(), full.archive.metrics());
    }

    #[test]
    fn latest_ignores_incomplete_directories() {
        let dir = tempfile::tempdir().unwrap();
        let p = Ppga::new(config()).unwrap();
        save(&p, dir.path()).unwrap();
        std::fs::create_dir_all(dir.path().join("iter_9.tmp")).unwrap();
        std::fs::create_dir_all(dir.path().join("iter_7")).unwrap();
        assert_eq!(latest(dir.path()).unwrap(), checkpoint_dir(dir.path(), 0));
    }

    #[test]
    fn mismatched_search_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = Ppga::new(config()).unwrap();
        let path = save(&p, dir.path()).unwrap();
        write_atomic(&path.join("search.bin"), &f32s_to_le_bytes(&[0.0; 3])).unwrap();
        assert!(matches!(load(&path), Err(PpgaError::Checkpoint { .. })));
    }
}
