//! CSV emission. Column order is fixed; floats use the shortest
//! representation that parses back to the identical value.

use std::fs::File;
use std::path::{Path, PathBuf};

use psinet::federation::RoundReport;
use psinet::interpret::PreferenceVector;
use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::Result;

pub const METRICS_FILE: &str = "metrics.csv";
pub const FEATUREMAP_FILE: &str = "featuremap.csv";
pub const NODE_FEATUREMAP_FILE: &str = "featuremap_nodes.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.psnf";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub strategy: String,
    /// `global` or `node<i>`.
    pub node_or_global: String,
    pub loss: f64,
    pub accuracy: f64,
    pub bytes_up: usize,
    pub bytes_down: usize,
    pub wall_ms: u64,
}

/// One global row followed by one row per node; the global row carries the
/// round's total traffic.
pub fn metrics_rows(report: &RoundReport) -> Vec<MetricsRow> {
    let mut rows = vec![MetricsRow {
        round: report.round,
        strategy: report.strategy.clone(),
        node_or_global: "global".into(),
        loss: report.global_loss,
        accuracy: report.global_accuracy,
        bytes_up: report.nodes.iter().map(|n| n.bytes_up).sum(),
        bytes_down: report.nodes.iter().map(|n| n.bytes_down).sum(),
        wall_ms: report.wall_ms,
    }];
    rows.extend(report.nodes.iter().map(|n| MetricsRow {
        round: report.round,
        strategy: report.strategy.clone(),
        node_or_global: format!("node{}", n.node),
        loss: n.loss,
        accuracy: n.accuracy,
        bytes_up: n.bytes_up,
        bytes_down: n.bytes_down,
        wall_ms: report.wall_ms,
    }));
    rows
}

/// Appends rows as rounds finish, flushing after each round so a failed run
/// keeps everything up to its last good round.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            inner: csv::Writer::from_writer(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, report: &RoundReport) -> Result<()> {
        for row in metrics_rows(report) {
            self.inner.serialize(row)?;
        }
        self.inner.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn pref_fields(pref: &PreferenceVector) -> Vec<String> {
    let mut rec = vec![
        pref.layer.to_string(),
        pref.channel.to_string(),
        opt(pref.group),
        opt(pref.top_class()),
    ];
    rec.extend(pref.p.iter().map(|v| v.to_string()));
    rec
}

fn pref_header(classes: usize) -> Vec<String> {
    let mut h: Vec<String> = ["layer", "channel", "group", "top_class"].map(String::from).to_vec();
    h.extend((0..classes).map(|c| format!("p_{c}")));
    h
}

/// Rows `layer, channel, group, top_class, p_0 … p_{C−1}`. Empty `group`
/// marks a shared channel, empty `top_class` a channel with no positive
/// preference.
pub fn write_featuremap(path: &Path, classes: usize, layers: &[Vec<PreferenceVector>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(pref_header(classes))?;
    for pref in layers.iter().flatten() {
        w.write_record(pref_fields(pref))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Same layout with a leading `node` column, for per-node local models.
pub fn write_node_featuremap(path: &Path, classes: usize, nodes: &[(usize, Vec<Vec<PreferenceVector>>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["node".to_string()];
    header.extend(pref_header(classes));
    w.write_record(header)?;
    for (node, layers) in nodes {
        for pref in layers.iter().flatten() {
            let mut rec = vec![node.to_string()];
            rec.extend(pref_fields(pref));
            w.write_record(rec)?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}
