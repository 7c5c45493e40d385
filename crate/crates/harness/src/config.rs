//! Layered run configuration: preset, environment preset, TOML file and
//! dotted `key=value` overrides, merged in that order.

use std::path::Path;

use ppga::archive::ArchiveSpec;
use ppga::envs::PointHopperConfig;
use ppga::ppga::{AnalyticConfig, EnvSpec, RunConfig, WalkMode};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::HarnessError;

/// Keys that no preset supplies; they must come from an environment preset,
/// a config file or an override.
pub const REQUIRED_KEYS: [&str; 4] = ["archive.resolution", "archive.lower_bounds", "archive.upper_bounds", "env.kind"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

fn placeholder_archive() -> ArchiveSpec {
    ArchiveSpec {
        resolution: vec![1],
        lower_bounds: vec![0.0],
        upper_bounds: vec![1.0],
        alpha: 0.1,
        threshold_min: 0.0,
        score_offset: 0.0,
    }
}

fn to_table<T: Serialize>(value: &T) -> Table {
    Table::try_from(value).expect("config types serialize to a TOML table")
}

/// Scalar settings of a preset; `archive` and `env` are left to the caller.
pub fn preset_table(preset: Preset) -> Table {
    let env = EnvSpec::PointHopper(PointHopperConfig::default());
    let config = match preset {
        Preset::Desk => RunConfig::desk(placeholder_archive(), env),
        Preset::Paper => RunConfig::paper(placeholder_archive(), env),
    };
    let mut table = to_table(&config);
    table.remove("archive");
    table.remove("env");
    table
}

/// Archive and environment settings for a named environment.
///
/// `pointhopper<k>` is a `k`-legged point hopper on a `25^k` grid (archive
/// learning rate 0.1); `sphere` is the analytic benchmark on a 50x50 grid,
/// which only supports weighted recombination.
pub fn env_preset(name: &str) -> Result<Table, HarnessError> {
    let mut table = Table::new();
    if let Some(legs) = name.strip_prefix("pointhopper") {
        let num_legs: usize = legs
            .parse()
            .map_err(|_| HarnessError::Config(format!("unknown environment preset `{name}`")))?;
        let env = PointHopperConfig { num_legs, ..PointHopperConfig::default() };
        env.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let archive = RunConfig::pointhopper_archive(&env, 25, 0.1);
        table.insert("archive".into(), Value::Table(to_table(&archive)));
        table.insert("env".into(), Value::Table(to_table(&EnvSpec::PointHopper(env))));
    } else if name == "sphere" {
        let env = AnalyticConfig::default();
        let floor = -(env.dim as f64);
        let archive = ArchiveSpec {
            resolution: vec![50; env.num_measures],
            lower_bounds: vec![0.0; env.num_measures],
            upper_bounds: vec![1.0; env.num_measures],
            alpha: 0.1,
            threshold_min: floor,
            score_offset: floor,
        };
        table.insert("archive".into(), Value::Table(to_table(&archive)));
        table.insert("env".into(), Value::Table(to_table(&EnvSpec::Analytic(env))));
        table.insert("walk_mode".into(), Value::try_from(WalkMode::WeightedRecombination).unwrap());
    } else {
        return Err(HarnessError::Config(format!("unknown environment preset `{name}`")));
    }
    Ok(table)
}

/// Recursively merges `top` into `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), HarnessError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override `{spec}`: `{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn lookup<'a>(table: &'a Table, dotted: &str) -> Option<&'a Value> {
    let mut parts = dotted.split('.');
    let mut value = table.get(parts.next()?)?;
    for p in parts {
        value = value.as_table()?.get(p)?;
    }
    Some(value)
}

/// Inputs to [`resolve`], in increasing precedence.
#[derive(Debug, Clone, Default)]
pub struct ConfigSources<'a> {
    pub preset: Preset,
    pub env: Option<&'a str>,
    pub file: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: Option<u64>,
    pub deterministic: bool,
}

/// Merges all sources into a table without validating it.
pub fn merged_table(src: &ConfigSources) -> Result<Table, HarnessError> {
    let mut table = preset_table(src.preset);
    if let Some(env) = src.env {
        merge(&mut table, env_preset(env)?);
    }
    if let Some(path) = src.file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let file: Table = text
            .parse()
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    for o in src.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = src.seed {
        table.insert("seed".into(), Value::Integer(seed as i64));
    }
    if src.deterministic {
        table.insert("deterministic".into(), Value::Boolean(true));
    }
    Ok(table)
}

/// Converts a merged table into a validated run config, naming the offending
/// field on failure.
pub fn from_table(table: Table) -> Result<RunConfig, HarnessError> {
    for key in REQUIRED_KEYS {
        if lookup(&table, key).is_none() {
            return Err(HarnessError::Config(format!("missing required field `{key}`")));
        }
    }
    let text = toml::to_string(&table).map_err(|e| HarnessError::Config(e.to_string()))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let config: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| HarnessError::Config(format!("field `{}`: {}", e.path(), e.inner().message())))?;
    config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(config)
}

pub fn resolve(src: &ConfigSources) -> Result<RunConfig, HarnessError> {
    from_table(merged_table(src)?)
}

pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string(config).expect("run config serializes to TOML")
}
