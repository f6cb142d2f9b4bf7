//! Named tensors persisted as a JSON manifest plus a little-endian blob.
//!
//! `model.json` lists every tensor with its shape, dtype and byte range in
//! `model.bin`. Values are stored as raw `f64` bits, so a round trip is
//! bit-exact.

use std::path::Path;

use cal_core::autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsio;

pub const FORMAT: &str = "cal-tensor-bundle";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub blob: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub config_hash: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Bundle {
    pub fn new(config_hash: &str, meta: serde_json::Value) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn get(&self, name: &str) -> CliResult<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CliError::other(format!("bundle has no tensor {name:?}")))
    }

    /// Writes `manifest` and its sibling `.bin` blob, blob first so a
    /// manifest never points at a blob that is not there yet.
    pub fn save(&self, manifest: &Path) -> CliResult<()> {
        let blob_path = fsio::blob_path(manifest);
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = blob.len() as u64;
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                nbytes: blob.len() as u64 - offset,
            });
        }
        fsio::write_atomic(&blob_path, &blob)?;
        let m = Manifest {
            format: FORMAT.into(),
            config_hash: self.config_hash.clone(),
            blob: blob_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        fsio::write_json(manifest, &m)
    }

    pub fn load(manifest: &Path) -> CliResult<Self> {
        let m: Manifest = fsio::read_json(manifest)?;
        if m.format != FORMAT {
            return Err(CliError::other(format!("{} is not a tensor bundle", manifest.display())));
        }
        let blob_path = manifest.with_file_name(&m.blob);
        let blob = fsio::read_artifact(&blob_path)?;
        let corrupt = |what: &str| CliError::other(format!("{}: {what}", manifest.display()));
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for e in &m.tensors {
            if e.dtype != "f64" {
                return Err(corrupt(&format!("unsupported dtype {}", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= blob.len() && e.nbytes as usize == count * 8)
                .ok_or_else(|| corrupt(&format!("tensor {} exceeds the blob", e.name)))?;
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        }
        Ok(Self {
            config_hash: m.config_hash,
            meta: m.meta,
            tensors,
        })
    }
}
