//! Run configuration: a TOML document mirroring the training
//! hyperparameters plus paths, task, and synthesis sections. Unknown
//! keys are rejected everywhere, command-line `--set` overrides are
//! applied before validation, and every command writes its fully
//! resolved configuration beside its outputs so a run can be reproduced
//! from that file alone.

use std::path::{Path, PathBuf};

use crate::signal::SynthConfig;
use crate::trainer::{Task, TrainConfig};

use super::CliError;

/// Environment variable that re-roots relative output directories.
pub const OUT_ROOT_ENV: &str = "STJEMA_OUT_ROOT";

/// Name of the resolved-configuration file written beside outputs.
pub const RESOLVED_CONFIG_NAME: &str = "resolved-config.toml";

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub paths: Paths,
    /// Downstream task; required by finetune, probe, ablate, and eval.
    pub task: Option<Task>,
    /// Synthetic-cohort parameters; required by synth.
    pub synth: Option<SynthConfig>,
    /// Seeds for multi-seed downstream runs (empty = just `train.seed`).
    pub seeds: Vec<u64>,
    pub ablate: AblateConfig,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Dataset manifest (JSON) listing subject files and labels.
    pub manifest: Option<PathBuf>,
    /// Output directory; created if absent.
    pub out_dir: PathBuf,
    /// Input checkpoint (pretrain resume, finetune/probe initialization,
    /// eval model).
    pub checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { manifest: None, out_dir: PathBuf::from("runs/out"), checkpoint: None }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Seeds averaged per variant (empty = just `train.seed`).
    pub seeds: Vec<u64>,
    /// Extra (alpha_min, alpha_max) pairs swept with the full objective.
    pub alpha_grid: Vec<[f64; 2]>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { seeds: Vec::new(), alpha_grid: Vec::new() }
    }
}

impl RunConfig {
    /// Seeds for downstream multi-seed runs.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// Read a TOML config, apply `--set key.path=value` overrides, and
/// deserialize with unknown-key rejection.
pub fn load_config(path: &Path, sets: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text, sets)
}

/// Parse a TOML document with overrides (separated from I/O for tests).
pub fn parse_config(text: &str, sets: &[String]) -> Result<RunConfig, CliError> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("config is not valid TOML: {e}")))?;
    for spec in sets {
        apply_override(&mut table, spec)?;
    }
    table
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key_path, raw_value) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {spec:?}")))?;
    let keys: Vec<&str> = key_path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("empty key segment in {key_path:?}")));
    }
    let mut current = table;
    for key in &keys[..keys.len() - 1] {
        current = current
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("{key} is not a table; cannot set {key_path}"))
            })?;
    }
    current.insert(keys[keys.len() - 1].to_string(), parse_value(raw_value));
    Ok(())
}

/// Interpret an override value as TOML when possible (numbers, booleans,
/// arrays, quoted strings); otherwise treat it as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(t) = wrapped.parse::<toml::Table>() {
        if let Some(v) = t.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// The effective output directory: `STJEMA_OUT_ROOT` re-roots relative
/// paths when set.
pub fn resolve_out_dir(paths: &Paths) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if paths.out_dir.is_relative() => PathBuf::from(root).join(&paths.out_dir),
        _ => paths.out_dir.clone(),
    }
}

/// Write the fully resolved configuration into `out_dir`.
pub fn write_resolved(out_dir: &Path, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Config(format!("cannot serialize resolved config: {e}")))?;
    let path = out_dir.join(RESOLVED_CONFIG_NAME);
    std::fs::write(&path, text)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
