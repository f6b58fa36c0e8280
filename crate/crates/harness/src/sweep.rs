//! One-parameter sweeps over a base config.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::experiment::run_experiment;
use crate::Result;

pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: String,
    pub strategy: String,
    pub shared_depth: Option<usize>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub best_accuracy: f64,
    pub bytes_up_total: usize,
    pub group_alignment: Option<f64>,
    pub node_agreement: Option<f64>,
}

/// Parses a command-line value as JSON, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets the field at a dotted path (`mapping.shared_depth`); intermediate
/// objects must exist, the final key may be new.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Config(format!("--param: malformed path `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut node = root;
    for key in parents {
        node = node
            .get_mut(*key)
            .filter(|v| v.is_object())
            .ok_or_else(|| HarnessError::Config(format!("--param: `{path}` has no object at `{key}`")))?;
    }
    node.as_object_mut()
        .ok_or_else(|| HarnessError::Config(format!("--param: `{path}` does not name an object field")))?
        .insert(last.to_string(), value);
    Ok(())
}

fn safe_component(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.=".contains(c) { c } else { '_' })
        .collect()
}

/// Builds one config per value; each writes into
/// `<output_dir>/<param>=<value>/`. All are validated before any runs.
pub fn sweep_configs(base: &ExperimentConfig, param: &str, values: &[String]) -> Result<Vec<ExperimentConfig>> {
    if values.is_empty() {
        return Err(HarnessError::Config("--values: give at least one value".into()));
    }
    let base_json = serde_json::to_value(base)?;
    values
        .iter()
        .map(|raw| {
            let mut v = base_json.clone();
            set_path(&mut v, param, parse_value(raw))?;
            let mut cfg: ExperimentConfig = serde_json::from_value(v)
                .map_err(|e| HarnessError::Config(format!("{param}={raw}: {e}")))?;
            cfg.output_dir = base.output_dir.join(safe_component(&format!("{param}={raw}")));
            cfg.validate()
                .map_err(|e| HarnessError::Config(format!("{param}={raw}: {}", e.detail())))?;
            Ok(cfg)
        })
        .collect()
}

/// Runs every variant and writes one summary row per (value, strategy).
pub fn run_sweep(base: &ExperimentConfig, param: &str, values: &[String]) -> Result<(PathBuf, Vec<SweepRow>)> {
    let configs = sweep_configs(base, param, values)?;
    let mut rows = Vec::new();
    for (cfg, raw) in configs.iter().zip(values) {
        log::info!("sweep {param}={raw}");
        let summary = run_experiment(cfg)?;
        rows.extend(summary.strategies.iter().map(|s| SweepRow {
            param: param.to_string(),
            value: raw.clone(),
            strategy: s.strategy.name().to_string(),
            shared_depth: summary.shared_depth,
            final_accuracy: s.final_accuracy,
            final_loss: s.final_loss,
            best_accuracy: s.best_accuracy,
            bytes_up_total: s.bytes_up_total,
            group_alignment: s.group_alignment,
            node_agreement: s.node_agreement,
        }));
    }
    let path = base.output_dir.join(SWEEP_SUMMARY_FILE);
    write_rows(&path, &rows)?;
    Ok((path, rows))
}

fn write_rows(path: &Path, rows: &[SweepRow]) -> Result<()> {
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new("."))).map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}
