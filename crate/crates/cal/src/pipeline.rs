//! Computations behind the subcommands, free of file handling.
//!
//! Every random quantity is seeded from the run's root seed through a
//! named stream, so two consumers never share a stream and adding a new
//! one leaves the others untouched.

use cal_core::align::{greedy_identity_search, AlignmentMap, MapSpec, Partition};
use cal_core::das::{eval_iia, train_das_cached, DasReport, HiddenCache, IiaReport};
use cal_core::mlp::{Mlp, TrainReport};
use cal_core::rng::stream_seed;
use cal_core::tasks::{
    gen_base_dataset, gen_interchange_dataset, AlgorithmId, BaseSample, InterchangeSample,
};
use cal_core::vacuity::{
    check_assumptions, construct_with, enumerate_interventions, mutation_test, sample_correct_inputs, verify_with,
    FiniteWorld,
};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PartitionMode};
use crate::error::CliResult;

/// Named seeds derived from one root seed.
pub mod seeds {
    use super::*;

    pub fn base(root: u64, split: &str) -> u64 {
        stream_seed(root, &format!("data/base/{split}"))
    }

    pub fn interchange(root: u64, alg: AlgorithmId, split: &str) -> u64 {
        stream_seed(root, &format!("data/{alg}/{split}"))
    }

    pub fn counterfactual(root: u64, alg: AlgorithmId, split: &str) -> u64 {
        stream_seed(root, &format!("data/counterfactual/{alg}/{split}"))
    }

    pub fn dnn(root: u64) -> u64 {
        stream_seed(root, "dnn")
    }

    pub fn das(root: u64, layer: usize, map: &MapSpec, size: usize) -> u64 {
        stream_seed(root, &format!("das/layer{layer}/{map}/size{size}"))
    }

    pub fn named(root: u64, purpose: &str) -> u64 {
        stream_seed(root, purpose)
    }
}

pub struct BaseSplits {
    pub train: Vec<BaseSample>,
    pub eval: Vec<BaseSample>,
    pub test: Vec<BaseSample>,
}

pub fn base_splits(cfg: &ExperimentConfig, root: u64) -> BaseSplits {
    let task = cfg.task_spec();
    BaseSplits {
        train: gen_base_dataset(task, cfg.dnn.train_size, seeds::base(root, "train")),
        eval: gen_base_dataset(task, cfg.dnn.eval_size, seeds::base(root, "eval")),
        test: gen_base_dataset(task, cfg.dnn.test_size, seeds::base(root, "test")),
    }
}

/// Interchange splits for the configured algorithm, keyed by split name.
pub const INTERCHANGE_SPLITS: [&str; 4] = ["train", "eval", "test", "search"];

pub fn interchange_split(cfg: &ExperimentConfig, root: u64, split: &str) -> CliResult<Vec<InterchangeSample>> {
    let n = match split {
        "train" => cfg.data.train,
        "eval" => cfg.data.eval,
        "test" => cfg.data.test,
        _ => cfg.greedy.search_size,
    };
    let alg = cfg.algorithm;
    Ok(gen_interchange_dataset(cfg.task_spec(), alg, n, seeds::interchange(root, alg, split), cfg.data.policy)?)
}

/// Counterfactual training data (train, eval) when the config asks for it.
pub fn counterfactual_splits(
    cfg: &ExperimentConfig,
    root: u64,
) -> CliResult<Option<(Vec<InterchangeSample>, Vec<InterchangeSample>)>> {
    let Some(cf) = &cfg.dnn.counterfactual else {
        return Ok(None);
    };
    let gen = |split: &str, n: usize| {
        gen_interchange_dataset(cfg.task_spec(), cf.algorithm, n, seeds::counterfactual(root, cf.algorithm, split), cf.policy)
    };
    Ok(Some((gen("train", cfg.dnn.train_size)?, gen("eval", cfg.dnn.eval_size)?)))
}

pub struct TrainedDnn {
    pub dnn: Mlp,
    pub report: Option<TrainReport>,
    pub test_accuracy: f64,
}

/// Initialise and (unless `init_only`) train the network for `root`.
pub fn train_dnn(
    cfg: &ExperimentConfig,
    root: u64,
    base: &BaseSplits,
    counterfactual: Option<&(Vec<InterchangeSample>, Vec<InterchangeSample>)>,
) -> CliResult<TrainedDnn> {
    let mcfg = cfg.mlp_config(seeds::dnn(root));
    let mut dnn = Mlp::new(&mcfg)?;
    let report = if cfg.dnn.init_only {
        None
    } else if let (Some(cf), Some((train, eval))) = (&cfg.dnn.counterfactual, counterfactual) {
        let width = dnn.layer_dim(cf.layer)?;
        let model = cf.algorithm.model();
        let slices = Partition::contiguous(width, &model.inner_nodes(), cf.size)?;
        Some(dnn.train_with_interventions(train, eval, cf.layer, &slices, &mcfg)?)
    } else {
        Some(dnn.train(&base.train, &base.eval, &mcfg)?)
    };
    let test_accuracy = dnn.accuracy(&base.test)?;
    Ok(TrainedDnn {
        dnn,
        report,
        test_accuracy,
    })
}

/// Neuron sets for one (layer, size) cell.
pub fn partition_for(
    cfg: &ExperimentConfig,
    dnn: &Mlp,
    layer: usize,
    size: usize,
    search: &[InterchangeSample],
) -> CliResult<Partition> {
    let model = cfg.algorithm.model();
    match cfg.partition {
        PartitionMode::Contiguous => Ok(Partition::contiguous(dnn.layer_dim(layer)?, &model.inner_nodes(), size)?),
        PartitionMode::Greedy => Ok(greedy_identity_search(dnn, &model, layer, size, search)?.partition),
    }
}

pub struct Alignment {
    pub map: AlignmentMap,
    pub partition: Partition,
    pub das: DasReport,
    pub iia: IiaReport,
}

/// Train one alignment map with DAS and score it on `test`.
#[allow(clippy::too_many_arguments)]
pub fn align(
    cfg: &ExperimentConfig,
    root: u64,
    dnn: &Mlp,
    layer: usize,
    map: MapSpec,
    size: usize,
    partition: Partition,
    train: &HiddenCache,
    eval: &HiddenCache,
    test: &[InterchangeSample],
) -> CliResult<Alignment> {
    let seed = seeds::das(root, layer, &map, size);
    let dcfg = cfg.das_config(layer, map, size, seed);
    let mut phi = AlignmentMap::new(&map, dnn.layer_dim(layer)?, seed)?;
    let das = train_das_cached(dnn, &mut phi, &partition, train, eval, &dcfg)?;
    let iia = eval_iia(dnn, &phi, &partition, layer, test, cfg.task_spec(), root)?;
    Ok(Alignment {
        map: phi,
        partition,
        das,
        iia,
    })
}

/// Everything the vacuity demonstrator reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VacuityReport {
    pub algorithm: AlgorithmId,
    pub layer: usize,
    pub depth: usize,
    pub inputs: usize,
    pub coords: Vec<(String, usize)>,
    pub assumptions_passed: bool,
    pub injective_layers: Vec<bool>,
    pub surjective_classes: Vec<bool>,
    pub task_correct: bool,
    pub task_accuracy: f64,
    pub settings_per_node: Vec<usize>,
    pub interventions: usize,
    pub forward_entries: usize,
    pub inverse_entries: usize,
    pub fresh_states: usize,
    pub evaluations: usize,
    pub iia: f64,
    pub mutation_iia: f64,
    pub config_hash: String,
    pub seed: u64,
}

/// Build the finite world, check its assumptions, construct the lookup map
/// and verify it. A violated assumption surfaces as an error naming it.
pub fn vacuity(cfg: &ExperimentConfig, root: u64, dnn: &Mlp) -> CliResult<VacuityReport> {
    let v = &cfg.vacuity;
    let xs = sample_correct_inputs(cfg.task_spec(), dnn, v.inputs, seeds::named(root, "vacuity/inputs"))?;
    let mut world = FiniteWorld::new(xs, dnn.clone(), cfg.algorithm.model(), v.layer, cfg.vacuity_coords(), v.depth)?;
    world.budget = v.budget;
    world.search = cfg.search_config();
    world.seed = seeds::named(root, "vacuity/search");
    let enumeration = enumerate_interventions(&world)?;
    let assumptions = check_assumptions(&world)?;
    let map = construct_with(&world, &assumptions, &enumeration)?;
    let iia = verify_with(&world, &map, &enumeration)?;
    let mutation = mutation_test(&world, &map)?;
    Ok(VacuityReport {
        algorithm: cfg.algorithm,
        layer: v.layer,
        depth: v.depth,
        inputs: v.inputs,
        coords: world.coords().to_vec(),
        assumptions_passed: assumptions.passed(),
        injective_layers: assumptions.injective_layers.clone(),
        surjective_classes: assumptions.surjective_classes.clone(),
        task_correct: assumptions.task_correct,
        task_accuracy: assumptions.task_accuracy,
        settings_per_node: enumeration.settings.iter().map(Vec::len).collect(),
        interventions: enumeration.count(),
        forward_entries: map.len(),
        inverse_entries: map.inverse_len(),
        fresh_states: map.fresh_count(),
        evaluations: iia.n,
        iia: iia.iia,
        mutation_iia: mutation.iia,
        config_hash: cfg.hash(),
        seed: root,
    })
}

/// The training and evaluation data a DAS run needs, cached at one layer.
pub fn caches(
    dnn: &Mlp,
    layer: usize,
    partition: &Partition,
    train: &[InterchangeSample],
    eval: &[InterchangeSample],
) -> CliResult<(HiddenCache, HiddenCache)> {
    let nodes: Vec<&str> = partition.node_ids().collect();
    Ok((HiddenCache::build(dnn, layer, &nodes, train)?, HiddenCache::build(dnn, layer, &nodes, eval)?))
}
