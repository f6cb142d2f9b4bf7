//! Where each artifact lives under the output root, and how networks and
//! alignment maps are checkpointed.

use std::path::{Path, PathBuf};

use cal_core::align::{AlignmentMap, MapSpec, Partition};
use cal_core::autodiff::Tensor;
use cal_core::mlp::Mlp;
use cal_core::tasks::AlgorithmId;
use serde::{Deserialize, Serialize};

use crate::bundle::Bundle;
use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

/// Short directory-safe name of a map family and its hyperparameters.
pub fn map_tag(map: &MapSpec) -> String {
    match *map {
        MapSpec::Revnet { layers, hidden } => format!("revnet-L{layers}-d{hidden}"),
        _ => map.family().to_string(),
    }
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn data_dir(&self, seed: u64) -> PathBuf {
        self.root.join("data").join(format!("s{seed}"))
    }

    pub fn base(&self, seed: u64, split: &str) -> PathBuf {
        self.data_dir(seed).join(format!("base-{split}.json"))
    }

    pub fn interchange(&self, seed: u64, alg: AlgorithmId, split: &str) -> PathBuf {
        self.data_dir(seed).join(format!("{alg}-{split}.json"))
    }

    pub fn counterfactual(&self, seed: u64, alg: AlgorithmId, split: &str) -> PathBuf {
        self.data_dir(seed).join(format!("counterfactual-{alg}-{split}.json"))
    }

    pub fn dnn_dir(&self, seed: u64) -> PathBuf {
        self.root.join("dnn").join(format!("s{seed}"))
    }

    pub fn dnn(&self, seed: u64) -> PathBuf {
        self.dnn_dir(seed).join("model.json")
    }

    pub fn map_dir(&self, seed: u64, alg: AlgorithmId, layer: usize, map: &MapSpec, size: usize) -> PathBuf {
        self.root
            .join("maps")
            .join(format!("s{seed}"))
            .join(alg.name())
            .join(format!("layer{layer}"))
            .join(format!("{}-size{size}", map_tag(map)))
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records")
    }

    pub fn greedy(&self, seed: u64, alg: AlgorithmId, layer: usize) -> PathBuf {
        self.root.join("greedy").join(format!("s{seed}")).join(format!("{alg}-layer{layer}.json"))
    }

    pub fn vacuity(&self, seed: u64, alg: AlgorithmId) -> PathBuf {
        self.root.join("vacuity").join(format!("s{seed}-{alg}.json"))
    }

    pub fn injectivity(&self, seed: u64) -> PathBuf {
        self.root.join("injectivity").join(format!("s{seed}.json"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MlpMeta {
    kind: String,
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
    seed: u64,
    test_accuracy: f64,
}

pub fn save_mlp(path: &Path, dnn: &Mlp, seed: u64, test_accuracy: f64, config_hash: &str) -> CliResult<()> {
    let meta = MlpMeta {
        kind: "mlp".into(),
        input_dim: dnn.input_dim(),
        hidden_dims: dnn.hidden_dims().to_vec(),
        num_classes: dnn.num_classes(),
        seed,
        test_accuracy,
    };
    let mut b = Bundle::new(config_hash, serde_json::to_value(meta)?);
    for (i, w) in dnn.weights().iter().enumerate() {
        b.push(format!("W{i}"), w);
    }
    for (i, bias) in dnn.biases().iter().enumerate() {
        b.push(format!("b{}", i + 1), bias);
    }
    b.save(path)
}

pub fn load_mlp(path: &Path) -> CliResult<Mlp> {
    let b = Bundle::load(path)?;
    let meta: MlpMeta = serde_json::from_value(b.meta.clone())
        .map_err(|e| CliError::other(format!("{}: not a network checkpoint ({e})", path.display())))?;
    let layers = meta.hidden_dims.len();
    let weights = (0..=layers).map(|i| b.get(&format!("W{i}")).cloned()).collect::<CliResult<Vec<Tensor>>>()?;
    let biases = (1..layers).map(|i| b.get(&format!("b{i}")).cloned()).collect::<CliResult<Vec<Tensor>>>()?;
    Ok(Mlp::from_parts(weights, biases)?)
}

/// Header of a map checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub family: String,
    pub spec: MapSpec,
    pub d: usize,
    #[serde(rename = "L_rn")]
    pub l_rn: Option<usize>,
    pub d_rn: Option<usize>,
    pub layer: usize,
    pub algorithm: AlgorithmId,
    pub partition: Partition,
    pub epochs: usize,
    pub seed: u64,
}

pub fn save_map(path: &Path, map: &AlignmentMap, meta: &MapMeta, config_hash: &str) -> CliResult<()> {
    let mut b = Bundle::new(config_hash, serde_json::to_value(meta)?);
    for (i, p) in map.params().iter().enumerate() {
        b.push(format!("param{i}"), p);
    }
    b.save(path)
}

pub fn load_map(path: &Path) -> CliResult<(AlignmentMap, MapMeta)> {
    let b = Bundle::load(path)?;
    let meta: MapMeta = serde_json::from_value(b.meta.clone())
        .map_err(|e| CliError::other(format!("{}: not a map checkpoint ({e})", path.display())))?;
    let mut map = AlignmentMap::new(&meta.spec, meta.d, 0)?;
    let count = map.params().len();
    if count != b.tensors.len() {
        return Err(CliError::other(format!(
            "{}: {} tensors for a map with {} parameters",
            path.display(),
            b.tensors.len(),
            count
        )));
    }
    for (p, (name, t)) in map.params_mut().into_iter().zip(&b.tensors) {
        if p.shape() != t.shape() {
            return Err(CliError::other(format!("{}: {name} has shape {:?}", path.display(), t.shape())));
        }
        p.data_mut().copy_from_slice(t.data());
    }
    Ok((map, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use cal_core::mlp::MlpConfig;

    #[test]
    fn network_checkpoint_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let dnn = Mlp::new(&MlpConfig::new(24, 24, 5)).unwrap();
        save_mlp(&p, &dnn, 5, 0.5, "h").unwrap();
        let back = load_mlp(&p).unwrap();
        assert_eq!(back.param_bits(), dnn.param_bits());
        assert_eq!(back.hidden_dims(), dnn.hidden_dims());
    }

    #[test]
    fn map_checkpoints_restore_every_family() {
        let dir = tempfile::tempdir().unwrap();
        let h = Tensor::new(vec![3, 16], (0..48).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        for spec in [MapSpec::Identity, MapSpec::Orthogonal, MapSpec::Revnet { layers: 2, hidden: 8 }] {
            let mut map = AlignmentMap::new(&spec, 16, 3).unwrap();
            for p in map.params_mut() {
                for (i, v) in p.data_mut().iter_mut().enumerate() {
                    *v += 0.01 * (i as f64).cos();
                }
            }
            let partition = Partition::contiguous(16, &["a", "b"], 4).unwrap();
            let meta = MapMeta {
                family: spec.family().into(),
                spec,
                d: 16,
                l_rn: None,
                d_rn: None,
                layer: 1,
                algorithm: AlgorithmId::BothEq,
                partition: partition.clone(),
                epochs: 0,
                seed: 3,
            };
            let p = dir.path().join(format!("{}.json", map_tag(&spec)));
            save_map(&p, &map, &meta, "h").unwrap();
            let (back, m) = load_map(&p).unwrap();
            assert_eq!(m.partition, partition);
            assert_eq!(back.apply(&h).unwrap().bits(), map.apply(&h).unwrap().bits());
        }
    }
}
