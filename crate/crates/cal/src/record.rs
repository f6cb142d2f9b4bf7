//! Run records, their CSV and JSON forms, and aggregate tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cal_core::align::MapSpec;
use cal_core::das::{aggregate, CellStats};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::fsio;

/// One row per trained or evaluated alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub alg: String,
    pub family: String,
    pub layer: usize,
    pub size: usize,
    pub d_rn: Option<usize>,
    #[serde(rename = "L_rn")]
    pub l_rn: Option<usize>,
    pub seed: u64,
    pub iia: f64,
    pub plain_acc: f64,
    pub epochs: usize,
    pub wall_ms: u64,
    pub config_hash: String,
}

impl RunRecord {
    pub fn map_fields(map: &MapSpec) -> (String, Option<usize>, Option<usize>) {
        match *map {
            MapSpec::Revnet { layers, hidden } => (map.family().into(), Some(hidden), Some(layers)),
            _ => (map.family().into(), None, None),
        }
    }
}

/// A record with the artifacts it produced or read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracedRecord {
    #[serde(flatten)]
    pub record: RunRecord,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
struct Sidecar<'a> {
    command: &'a str,
    config_hash: String,
    git_describe: String,
    config: &'a ExperimentConfig,
    records: &'a [TracedRecord],
}

/// `git describe` of the working tree, or `"unknown"` outside a checkout.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| crate::error::CliError::other(e.to_string()))
}

/// Writes `<stem>.csv` and `<stem>.json`; returns the CSV path.
pub fn write_records(
    dir: &Path,
    stem: &str,
    command: &str,
    cfg: &ExperimentConfig,
    records: &[TracedRecord],
) -> CliResult<PathBuf> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let rows: Vec<&RunRecord> = records.iter().map(|r| &r.record).collect();
    fsio::write_atomic(&csv_path, &csv_bytes(&rows)?)?;
    let sidecar = Sidecar {
        command,
        config_hash: cfg.hash(),
        git_describe: git_describe(),
        config: cfg,
        records,
    };
    fsio::write_json(&dir.join(format!("{stem}.json")), &sidecar)?;
    Ok(csv_path)
}

/// One plot-ready row: a sweep cell summarised across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub alg: String,
    pub family: String,
    pub layer: usize,
    pub size: usize,
    pub d_rn: Option<usize>,
    #[serde(rename = "L_rn")]
    pub l_rn: Option<usize>,
    pub n_seeds: usize,
    pub iia_max: f64,
    pub iia_mean: f64,
    pub iia_sd: f64,
    pub iia_ci95: f64,
    pub plain_acc_mean: f64,
    pub config_hash: String,
}

/// Group records by everything except the seed, in first-seen order.
pub fn aggregate_records(records: &[RunRecord]) -> Vec<AggregateRow> {
    type Key = (String, String, String, usize, usize, Option<usize>, Option<usize>, String);
    let mut order: Vec<Key> = Vec::new();
    let mut cells: BTreeMap<Key, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.task.clone(),
            r.alg.clone(),
            r.family.clone(),
            r.layer,
            r.size,
            r.d_rn,
            r.l_rn,
            r.config_hash.clone(),
        );
        if !cells.contains_key(&key) {
            order.push(key.clone());
        }
        cells.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let rs = &cells[&key];
            let iia: Vec<f64> = rs.iter().map(|r| r.iia).collect();
            let s: CellStats = aggregate(&iia).expect("cell is non-empty");
            let (task, alg, family, layer, size, d_rn, l_rn, config_hash) = key;
            AggregateRow {
                task,
                alg,
                family,
                layer,
                size,
                d_rn,
                l_rn,
                n_seeds: s.n,
                iia_max: s.max,
                iia_mean: s.mean,
                iia_sd: s.sd,
                iia_ci95: s.ci95,
                plain_acc_mean: rs.iter().map(|r| r.plain_acc).sum::<f64>() / rs.len() as f64,
                config_hash,
            }
        })
        .collect()
}

/// `mean ± sd` with four decimals.
pub fn mean_sd(values: &[f64]) -> String {
    match aggregate(values) {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.sd),
        None => String::new(),
    }
}
