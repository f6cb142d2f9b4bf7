//! Dataset files: a JSON manifest describing the column layout and a blob
//! of little-endian `f64` rows.
//!
//! Base rows are `x, y`. Interchange rows are `x_base`, then for every
//! inner node of the algorithm a presence flag followed by the source
//! input (zeros when absent), then `y_gold`.

use std::collections::BTreeMap;
use std::path::Path;

use cal_core::tasks::{AlgorithmId, BaseSample, InterchangeSample, NodePolicy, TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub start: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: String,
    pub task: TaskKind,
    pub alg: Option<AlgorithmId>,
    pub n: usize,
    pub seed: u64,
    pub policy: Option<NodePolicy>,
    pub row_width: usize,
    pub columns: Vec<Column>,
    pub blob: String,
    pub config_hash: String,
}

fn layout(task: TaskSpec, alg: Option<AlgorithmId>) -> Vec<Column> {
    let d = task.input_dim();
    let mut cols = Vec::new();
    let mut at = 0;
    let mut push = |name: String, width: usize| {
        cols.push(Column { name, start: at, width });
        at += width;
    };
    match alg {
        None => {
            push("x".into(), d);
            push("y".into(), 1);
        }
        Some(a) => {
            push("x_base".into(), d);
            for node in a.model().inner_nodes() {
                push(format!("has_source[{node}]"), 1);
                push(format!("source[{node}]"), d);
            }
            push("y_gold".into(), 1);
        }
    }
    cols
}

fn write(path: &Path, mut manifest: DatasetManifest, rows: Vec<f64>) -> CliResult<()> {
    let blob = fsio::blob_path(path);
    manifest.blob = blob.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let bytes: Vec<u8> = rows.iter().flat_map(|v| v.to_le_bytes()).collect();
    fsio::write_atomic(&blob, &bytes)?;
    fsio::write_json(path, &manifest)
}

fn read(path: &Path, kind: &str) -> CliResult<(DatasetManifest, Vec<f64>)> {
    let m: DatasetManifest = fsio::read_json(path)?;
    if m.kind != kind {
        return Err(CliError::other(format!("{} holds a {} dataset, expected {}", path.display(), m.kind, kind)));
    }
    let bytes = fsio::read_artifact(&path.with_file_name(&m.blob))?;
    if bytes.len() != m.n * m.row_width * 8 {
        return Err(CliError::other(format!("{}: blob size does not match manifest", path.display())));
    }
    let rows = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((m, rows))
}

pub fn save_base(path: &Path, task: TaskSpec, seed: u64, data: &[BaseSample], config_hash: &str) -> CliResult<()> {
    let columns = layout(task, None);
    let row_width = task.input_dim() + 1;
    let mut rows = Vec::with_capacity(data.len() * row_width);
    for s in data {
        rows.extend_from_slice(&s.x);
        rows.push(s.y as f64);
    }
    let m = DatasetManifest {
        kind: "base".into(),
        task: task.kind,
        alg: None,
        n: data.len(),
        seed,
        policy: None,
        row_width,
        columns,
        blob: String::new(),
        config_hash: config_hash.into(),
    };
    write(path, m, rows)
}

pub fn load_base(path: &Path) -> CliResult<(DatasetManifest, Vec<BaseSample>)> {
    let (m, rows) = read(path, "base")?;
    let d = TaskSpec::of(m.task).input_dim();
    let data = rows
        .chunks_exact(m.row_width)
        .map(|r| BaseSample {
            x: r[..d].to_vec(),
            y: r[d] as usize,
        })
        .collect();
    Ok((m, data))
}

pub fn save_interchange(
    path: &Path,
    alg: AlgorithmId,
    seed: u64,
    policy: NodePolicy,
    data: &[InterchangeSample],
    config_hash: &str,
) -> CliResult<()> {
    let task = TaskSpec::of(alg.task());
    let d = task.input_dim();
    let nodes = alg.model().inner_nodes().into_iter().map(String::from).collect::<Vec<_>>();
    let row_width = d + nodes.len() * (d + 1) + 1;
    let mut rows = Vec::with_capacity(data.len() * row_width);
    for s in data {
        rows.extend_from_slice(&s.x_base);
        for node in &nodes {
            match s.sources.get(node) {
                Some(src) => {
                    rows.push(1.0);
                    rows.extend_from_slice(src);
                }
                None => {
                    rows.push(0.0);
                    rows.resize(rows.len() + d, 0.0);
                }
            }
        }
        rows.push(s.y_gold as f64);
    }
    let m = DatasetManifest {
        kind: "interchange".into(),
        task: task.kind,
        alg: Some(alg),
        n: data.len(),
        seed,
        policy: Some(policy),
        row_width,
        columns: layout(task, Some(alg)),
        blob: String::new(),
        config_hash: config_hash.into(),
    };
    write(path, m, rows)
}

pub fn load_interchange(path: &Path) -> CliResult<(DatasetManifest, Vec<InterchangeSample>)> {
    let (m, rows) = read(path, "interchange")?;
    let alg = m.alg.ok_or_else(|| CliError::other(format!("{}: interchange dataset without algorithm", path.display())))?;
    let d = TaskSpec::of(m.task).input_dim();
    let nodes = alg.model().inner_nodes().into_iter().map(String::from).collect::<Vec<_>>();
    let data = rows
        .chunks_exact(m.row_width)
        .map(|r| {
            let mut sources = BTreeMap::new();
            let mut at = d;
            for node in &nodes {
                if r[at] != 0.0 {
                    sources.insert(node.clone(), r[at + 1..at + 1 + d].to_vec());
                }
                at += d + 1;
            }
            InterchangeSample {
                x_base: r[..d].to_vec(),
                sources,
                y_gold: r[at] as usize,
            }
        })
        .collect();
    Ok((m, data))
}
