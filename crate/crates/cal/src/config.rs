//! Experiment configuration: one JSON document per experiment.

use std::collections::BTreeMap;
use std::path::Path;

use cal_core::align::MapSpec;
use cal_core::das::DasConfig;
use cal_core::mlp::MlpConfig;
use cal_core::tasks::{AlgorithmId, NodePolicy, TaskKind, TaskSpec};
use cal_core::vacuity::SearchConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::fsio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub algorithm: AlgorithmId,
    #[serde(default)]
    pub dnn: DnnSection,
    #[serde(default = "default_maps")]
    pub maps: Vec<MapSpec>,
    #[serde(default = "default_layers")]
    pub layers: Vec<usize>,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub partition: PartitionMode,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub das: DasSection,
    #[serde(default)]
    pub greedy: GreedySection,
    #[serde(default)]
    pub vacuity: VacuitySection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Subdirectory of the output root for this experiment.
    #[serde(default)]
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnnSection {
    /// Defaults to three layers of 16 (heq) or 24 (dlaw).
    pub hidden_dims: Option<Vec<usize>>,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub train_size: usize,
    pub eval_size: usize,
    pub test_size: usize,
    /// Skip training and keep the random initialisation.
    pub init_only: bool,
    pub counterfactual: Option<CounterfactualSection>,
}

impl Default for DnnSection {
    fn default() -> Self {
        Self {
            hidden_dims: None,
            lr: 1e-3,
            batch: 1024,
            max_epochs: 20,
            patience: 3,
            train_size: 262_144,
            eval_size: 10_000,
            test_size: 10_000,
            init_only: false,
            counterfactual: None,
        }
    }
}

/// Train the network so that `algorithm`'s inner nodes live in contiguous
/// slices of `size` neurons at `layer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterfactualSection {
    pub algorithm: AlgorithmId,
    pub layer: usize,
    pub size: usize,
    #[serde(default = "all_subsets")]
    pub policy: NodePolicy,
}

fn all_subsets() -> NodePolicy {
    NodePolicy::AllSubsets
}

/// How the neurons of each node are chosen when a map is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    /// Consecutive blocks of `size` latent coordinates in node order.
    #[default]
    Contiguous,
    /// Neuron sets of `size` found by greedy search under the identity map.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: usize,
    pub eval: usize,
    pub test: usize,
    pub policy: NodePolicy,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: 128_000,
            eval: 10_000,
            test: 10_000,
            policy: NodePolicy::NonEmptySubsets,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DasSection {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub improve_threshold: f64,
}

impl Default for DasSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch: 640,
            max_epochs: 50,
            patience: 5,
            improve_threshold: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreedySection {
    pub max_size: usize,
    pub search_size: usize,
}

impl Default for GreedySection {
    fn default() -> Self {
        Self {
            max_size: 2,
            search_size: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VacuitySection {
    pub inputs: usize,
    pub depth: usize,
    pub layer: usize,
    /// Coordinate per inner node; defaults to `0, 1, …` in node order.
    pub coords: Option<BTreeMap<String, usize>>,
    pub budget: usize,
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for VacuitySection {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            inputs: 8,
            depth: 1,
            layer: 1,
            coords: None,
            budget: cal_core::vacuity::DEFAULT_BUDGET,
            restarts: s.restarts,
            steps: s.steps,
            lr: s.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub collision_samples: usize,
    pub n_all: usize,
    pub n_ref: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            collision_samples: 100_000,
            n_all: 100_000,
            n_ref: 2_000,
        }
    }
}

fn default_maps() -> Vec<MapSpec> {
    vec![MapSpec::Revnet { layers: 10, hidden: 16 }]
}

fn default_layers() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_sizes() -> Vec<usize> {
    vec![8]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn positive_lr(lr: f64) -> bool {
    lr > 0.0 && lr.is_finite()
}

impl ExperimentConfig {
    /// A config with every section at its default.
    pub fn new(task: TaskKind, algorithm: AlgorithmId) -> Self {
        Self {
            task,
            algorithm,
            dnn: DnnSection::default(),
            maps: default_maps(),
            layers: default_layers(),
            sizes: default_sizes(),
            partition: PartitionMode::default(),
            data: DataSection::default(),
            das: DasSection::default(),
            greedy: GreedySection::default(),
            vacuity: VacuitySection::default(),
            diagnostics: DiagnosticsSection::default(),
            seeds: default_seeds(),
            out_dir: None,
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fsio::read_artifact(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::config("config is not UTF-8"))?;
        Self::from_json(&text)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec::of(self.task)
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.dnn.hidden_dims.clone().unwrap_or_else(|| {
            let w = match self.task {
                TaskKind::Heq => 16,
                TaskKind::Dlaw => 24,
            };
            vec![w; 3]
        })
    }

    pub fn mlp_config(&self, seed: u64) -> MlpConfig {
        let spec = self.task_spec();
        MlpConfig {
            input_dim: spec.input_dim(),
            hidden_dims: self.hidden_dims(),
            num_classes: spec.num_classes(),
            seed,
            lr: self.dnn.lr,
            batch: self.dnn.batch,
            max_epochs: self.dnn.max_epochs,
            patience: self.dnn.patience,
        }
    }

    pub fn das_config(&self, layer: usize, map: MapSpec, size: usize, seed: u64) -> DasConfig {
        let mut c = DasConfig::new(layer, self.algorithm, map, size, seed);
        c.lr = self.das.lr;
        c.batch = self.das.batch;
        c.max_epochs = self.das.max_epochs;
        c.patience = self.das.patience;
        c.improve_threshold = self.das.improve_threshold;
        c
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            restarts: self.vacuity.restarts,
            steps: self.vacuity.steps,
            lr: self.vacuity.lr,
        }
    }

    /// Vacuity coordinates: the configured ones, or `0, 1, …` in node order.
    pub fn vacuity_coords(&self) -> BTreeMap<String, usize> {
        self.vacuity.coords.clone().unwrap_or_else(|| {
            self.algorithm
                .model()
                .inner_nodes()
                .into_iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i))
                .collect()
        })
    }

    /// Reject every combination that a downstream module would refuse, so
    /// nothing fails halfway through a sweep.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::config(m));
        if self.algorithm.task() != self.task {
            return bad(format!("algorithm {} does not solve task {}", self.algorithm, self.task));
        }
        let dims = self.hidden_dims();
        let depth = dims.len();
        let mlp = self.mlp_config(0);
        mlp.validate().map_err(|e| CliError::config(e.to_string()))?;
        if self.dnn.patience == 0 || self.dnn.max_epochs == 0 {
            return bad("dnn.max_epochs and dnn.patience must be positive".into());
        }
        if self.dnn.train_size == 0 || self.dnn.eval_size == 0 || self.dnn.test_size == 0 {
            return bad("dnn dataset sizes must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if self.layers.is_empty() || self.sizes.is_empty() || self.maps.is_empty() {
            return bad("layers, sizes and maps must not be empty".into());
        }
        if self.data.train == 0 || self.data.eval == 0 || self.data.test == 0 {
            return bad("data sizes must be positive".into());
        }
        if self.das.batch == 0 || !positive_lr(self.das.lr) {
            return bad("das.batch and das.lr must be positive".into());
        }
        if self.das.max_epochs == 0 || self.das.patience == 0 {
            return bad("das.max_epochs and das.patience must be positive".into());
        }
        if !(self.das.improve_threshold >= 0.0 && self.das.improve_threshold.is_finite()) {
            return bad("das.improve_threshold must be a non-negative number".into());
        }
        let nodes = self.algorithm.model().inner_nodes().len();
        for &layer in &self.layers {
            if layer == 0 || layer > depth {
                return bad(format!("layer {layer} outside 1..={depth}"));
            }
            let width = dims[layer - 1];
            for &size in &self.sizes {
                if size == 0 || size * nodes > width {
                    return bad(format!("intervention size {size} for {nodes} nodes exceeds layer {layer} width {width}"));
                }
                if self.partition == PartitionMode::Greedy && size * nodes >= width {
                    return bad(format!("greedy partitions of size {size} leave no free neuron at layer {layer}"));
                }
            }
            for map in &self.maps {
                if let MapSpec::Revnet { layers, hidden } = *map {
                    if layers == 0 || hidden == 0 {
                        return bad(format!("{map} needs positive depth and width"));
                    }
                    if width % 2 != 0 {
                        return bad(format!("{map} cannot act on odd width {width} at layer {layer}"));
                    }
                }
            }
            if self.greedy.max_size == 0 || self.greedy.max_size * nodes >= width {
                return bad(format!(
                    "greedy.max_size {} for {nodes} nodes leaves no free neuron at layer {layer}",
                    self.greedy.max_size
                ));
            }
        }
        if self.greedy.search_size == 0 {
            return bad("greedy.search_size must be positive".into());
        }
        if let Some(cf) = &self.dnn.counterfactual {
            if cf.algorithm.task() != self.task {
                return bad(format!("counterfactual algorithm {} does not solve task {}", cf.algorithm, self.task));
            }
            if cf.layer == 0 || cf.layer > depth {
                return bad(format!("counterfactual layer {} outside 1..={depth}", cf.layer));
            }
            let k = cf.algorithm.model().inner_nodes().len();
            if cf.size == 0 || cf.size * k > dims[cf.layer - 1] {
                return bad(format!("counterfactual size {} does not fit layer {}", cf.size, cf.layer));
            }
        }
        self.validate_vacuity(&dims, nodes)?;
        let d = &self.diagnostics;
        if d.collision_samples < 2 || d.n_all < 2 || d.n_ref == 0 || d.n_ref > d.n_all {
            return bad("diagnostics needs ≥ 2 samples and 0 < n_ref ≤ n_all".into());
        }
        Ok(())
    }

    fn validate_vacuity(&self, dims: &[usize], nodes: usize) -> CliResult<()> {
        let v = &self.vacuity;
        let bad = |m: String| Err(CliError::config(m));
        if v.inputs < 2 {
            return bad("vacuity.inputs must be at least 2".into());
        }
        if v.layer == 0 || v.layer > dims.len() {
            return bad(format!("vacuity.layer {} outside 1..={}", v.layer, dims.len()));
        }
        if v.budget == 0 {
            return bad("vacuity.budget must be positive".into());
        }
        if v.restarts == 0 || v.steps == 0 || !positive_lr(v.lr) {
            return bad("vacuity search needs positive restarts, steps and lr".into());
        }
        let width = dims[v.layer - 1];
        let coords = self.vacuity_coords();
        let inner = self.algorithm.model();
        let inner = inner.inner_nodes();
        if coords.len() != nodes || inner.iter().any(|n| !coords.contains_key(*n)) {
            return bad("vacuity.coords must name every inner node exactly once".into());
        }
        let mut used: Vec<usize> = coords.values().copied().collect();
        used.sort_unstable();
        used.dedup();
        if used.len() != nodes || used.iter().any(|&c| c >= width) {
            return bad(format!("vacuity.coords must be distinct and below the layer width {width}"));
        }
        if nodes >= width {
            return bad("vacuity needs an unused coordinate at its layer".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form (sorted keys). The output
    /// location is not part of an experiment's identity and is left out.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("out_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"task":"heq","algorithm":"both-eq"}"#).unwrap();
        assert_eq!(c.hidden_dims(), vec![16, 16, 16]);
        assert_eq!(c.data.train, 128_000);
        assert_eq!(c, ExperimentConfig::new(TaskKind::Heq, AlgorithmId::BothEq));
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = ExperimentConfig::from_json(r#"{"task":"heq","algorithm":"both-eq","seeds":[1,2],"out_dir":"x"}"#).unwrap();
        let b = ExperimentConfig::from_json(r#"{"seeds":[1,2],"algorithm":"both-eq","task":"heq"}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_json(r#"{"seeds":[1,3],"algorithm":"both-eq","task":"heq"}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn map_families_parse() {
        let c = ExperimentConfig::from_json(
            r#"{"task":"heq","algorithm":"both-eq","maps":[{"family":"identity"},{"family":"orthogonal"},{"family":"revnet","layers":1,"hidden":64}]}"#,
        )
        .unwrap();
        assert_eq!(c.maps[2], MapSpec::Revnet { layers: 1, hidden: 64 });
    }
}
