//! The eight subcommands. Each reads its inputs from the output root,
//! writes its outputs there atomically and returns a summary.

use std::path::PathBuf;
use std::time::Instant;

use cal_core::align::{greedy_identity_search, AlignmentMap, GreedyResult, MapSpec};
use cal_core::das::{eval_iia, DasEpoch, IiaReport};
use cal_core::diagnostics::{collision_probe, min_distance_table, ClassMinima, CollisionReport, DistanceReport};
use cal_core::mlp::{EpochMetrics, Mlp};
use cal_core::tasks::{InterchangeSample, TaskKind};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, Layout, MapMeta};
use crate::config::ExperimentConfig;
use crate::dataset;
use crate::error::{CliError, CliResult};
use crate::fsio;
use crate::jobs;
use crate::pipeline::{self, seeds, BaseSplits, INTERCHANGE_SPLITS};
use crate::record::{self, RunRecord, TracedRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainDnn,
    TrainAlign,
    EvalIia,
    GreedyId,
    Sweep,
    VacuityDemo,
    InjectivityProbe,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainDnn => "train-dnn",
            Command::TrainAlign => "train-align",
            Command::EvalIia => "eval-iia",
            Command::GreedyId => "greedy-id",
            Command::Sweep => "sweep",
            Command::VacuityDemo => "vacuity-demo",
            Command::InjectivityProbe => "injectivity-probe",
        }
    }
}

/// Printed on stdout when a command succeeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub config_hash: String,
    pub outputs: Vec<PathBuf>,
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub jobs: usize,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, root: PathBuf, jobs: usize) -> Self {
        Self {
            cfg,
            layout: Layout::new(root),
            jobs: jobs.max(1),
        }
    }

    fn hash(&self) -> String {
        self.cfg.hash()
    }

    fn records_stem(&self, command: &str) -> String {
        format!("{command}-{}", self.cfg.short_hash())
    }
}

pub fn run(cmd: Command, ctx: &Context) -> CliResult<Summary> {
    let outputs = match cmd {
        Command::GenData => gen_data(ctx)?,
        Command::TrainDnn => train_dnn(ctx)?,
        Command::TrainAlign => train_align(ctx)?.0,
        Command::EvalIia => eval_iia_cmd(ctx)?,
        Command::GreedyId => greedy_id(ctx)?,
        Command::Sweep => sweep(ctx)?,
        Command::VacuityDemo => vacuity_demo(ctx)?,
        Command::InjectivityProbe => injectivity_probe(ctx)?,
    };
    Ok(Summary {
        command: cmd.name().into(),
        config_hash: ctx.hash(),
        outputs,
    })
}

pub fn gen_data(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let hash = ctx.hash();
    let per_seed = jobs::run(&cfg.seeds, ctx.jobs, |&seed| -> CliResult<Vec<PathBuf>> {
        let mut out = Vec::new();
        let base = pipeline::base_splits(cfg, seed);
        for (split, data) in [("train", &base.train), ("eval", &base.eval), ("test", &base.test)] {
            let p = ctx.layout.base(seed, split);
            dataset::save_base(&p, cfg.task_spec(), seeds::base(seed, split), data, &hash)?;
            out.push(p);
        }
        for split in INTERCHANGE_SPLITS {
            let data = pipeline::interchange_split(cfg, seed, split)?;
            let p = ctx.layout.interchange(seed, cfg.algorithm, split);
            let s = seeds::interchange(seed, cfg.algorithm, split);
            dataset::save_interchange(&p, cfg.algorithm, s, cfg.data.policy, &data, &hash)?;
            out.push(p);
        }
        if let (Some(cf), Some((train, eval))) = (&cfg.dnn.counterfactual, pipeline::counterfactual_splits(cfg, seed)?) {
            for (split, data) in [("train", &train), ("eval", &eval)] {
                let p = ctx.layout.counterfactual(seed, cf.algorithm, split);
                let s = seeds::counterfactual(seed, cf.algorithm, split);
                dataset::save_interchange(&p, cf.algorithm, s, cf.policy, data, &hash)?;
                out.push(p);
            }
        }
        Ok(out)
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    epoch: usize,
    loss: f64,
    eval_acc: f64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct DnnReport<'a> {
    config_hash: &'a str,
    seed: u64,
    trained: bool,
    counterfactual: bool,
    test_accuracy: f64,
    best_epoch: Option<usize>,
    best_eval_acc: Option<f64>,
    epochs: Vec<EpochMetrics>,
    wall_ms: u64,
    inputs: Vec<PathBuf>,
}

pub fn train_dnn(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let hash = ctx.hash();
    let per_seed = jobs::run(&cfg.seeds, ctx.jobs, |&seed| -> CliResult<Vec<PathBuf>> {
        let start = Instant::now();
        let mut inputs = Vec::new();
        let mut load = |split: &str| -> CliResult<_> {
            let p = ctx.layout.base(seed, split);
            let data = dataset::load_base(&p)?.1;
            inputs.push(p);
            Ok(data)
        };
        let base = BaseSplits {
            train: load("train")?,
            eval: load("eval")?,
            test: load("test")?,
        };
        let cf = match &cfg.dnn.counterfactual {
            Some(cf) => {
                let mut load = |split: &str| -> CliResult<Vec<InterchangeSample>> {
                    let p = ctx.layout.counterfactual(seed, cf.algorithm, split);
                    let data = dataset::load_interchange(&p)?.1;
                    inputs.push(p);
                    Ok(data)
                };
                Some((load("train")?, load("eval")?))
            }
            None => None,
        };
        let trained = pipeline::train_dnn(cfg, seed, &base, cf.as_ref())?;
        let dir = ctx.layout.dnn_dir(seed);
        let model = ctx.layout.dnn(seed);
        artifacts::save_mlp(&model, &trained.dnn, seed, trained.test_accuracy, &hash)?;
        let epochs = trained.report.as_ref().map(|r| r.epochs.clone()).unwrap_or_default();
        let rows: Vec<MetricsRow> = epochs
            .iter()
            .map(|e| MetricsRow {
                epoch: e.epoch,
                loss: e.loss,
                eval_acc: e.eval_acc,
                config_hash: &hash,
            })
            .collect();
        let metrics = dir.join("metrics.csv");
        fsio::write_atomic(&metrics, &record::csv_bytes(&rows)?)?;
        let report = DnnReport {
            config_hash: &hash,
            seed,
            trained: trained.report.is_some(),
            counterfactual: cfg.dnn.counterfactual.is_some() && trained.report.is_some(),
            test_accuracy: trained.test_accuracy,
            best_epoch: trained.report.as_ref().map(|r| r.best_epoch),
            best_eval_acc: trained.report.as_ref().map(|r| r.best_eval_acc),
            epochs,
            wall_ms: start.elapsed().as_millis() as u64,
            inputs,
        };
        let report_path = dir.join("report.json");
        fsio::write_json(&report_path, &report)?;
        log::info!("seed {seed}: test accuracy {:.4}", trained.test_accuracy);
        Ok(vec![model, metrics, report_path])
    })?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn load_split(ctx: &Context, seed: u64, split: &str, inputs: &mut Vec<PathBuf>) -> CliResult<Vec<InterchangeSample>> {
    let p = ctx.layout.interchange(seed, ctx.cfg.algorithm, split);
    let data = dataset::load_interchange(&p)?.1;
    inputs.push(p);
    Ok(data)
}

fn load_dnn(ctx: &Context, seed: u64, inputs: &mut Vec<PathBuf>) -> CliResult<Mlp> {
    let p = ctx.layout.dnn(seed);
    let dnn = artifacts::load_mlp(&p)?;
    inputs.push(p);
    Ok(dnn)
}

/// One grid point: seed, layer, map and intervention size.
#[derive(Clone, Copy)]
struct Cell<'a> {
    seed: u64,
    layer: usize,
    map: &'a MapSpec,
    size: usize,
}

fn record_for(ctx: &Context, cell: Cell, iia: &IiaReport, epochs: usize, wall_ms: u64) -> RunRecord {
    let Cell { seed, layer, map, size } = cell;
    let (family, d_rn, l_rn) = RunRecord::map_fields(map);
    RunRecord {
        task: ctx.cfg.task.name().into(),
        alg: ctx.cfg.algorithm.name().into(),
        family,
        layer,
        size,
        d_rn,
        l_rn,
        seed,
        iia: iia.iia,
        plain_acc: iia.dnn_plain_accuracy,
        epochs,
        wall_ms,
        config_hash: ctx.hash(),
    }
}

fn seed_layer_cells(cfg: &ExperimentConfig) -> Vec<(u64, usize)> {
    cfg.seeds.iter().flat_map(|&s| cfg.layers.iter().map(move |&l| (s, l))).collect()
}

#[derive(Serialize)]
struct DasRow<'a> {
    epoch: usize,
    train_loss: f64,
    eval_loss: f64,
    eval_iia: f64,
    config_hash: &'a str,
}

/// Trains every (seed, layer, map, size) cell; returns outputs and records.
pub fn train_align(ctx: &Context) -> CliResult<(Vec<PathBuf>, Vec<RunRecord>)> {
    let cfg = &ctx.cfg;
    let hash = ctx.hash();
    let cells = seed_layer_cells(cfg);
    let per_cell = jobs::run(&cells, ctx.jobs, |&(seed, layer)| -> CliResult<Vec<(TracedRecord, Vec<PathBuf>)>> {
        let mut inputs = Vec::new();
        let dnn = load_dnn(ctx, seed, &mut inputs)?;
        let train = load_split(ctx, seed, "train", &mut inputs)?;
        let eval = load_split(ctx, seed, "eval", &mut inputs)?;
        let test = load_split(ctx, seed, "test", &mut inputs)?;
        let search = match cfg.partition {
            crate::config::PartitionMode::Greedy => load_split(ctx, seed, "search", &mut inputs)?,
            crate::config::PartitionMode::Contiguous => Vec::new(),
        };
        let first = pipeline::partition_for(cfg, &dnn, layer, cfg.sizes[0], &search)?;
        let (train_cache, eval_cache) = pipeline::caches(&dnn, layer, &first, &train, &eval)?;
        drop((train, eval));
        let mut out = Vec::new();
        for map in &cfg.maps {
            for &size in &cfg.sizes {
                let start = Instant::now();
                let partition = pipeline::partition_for(cfg, &dnn, layer, size, &search)?;
                let a = pipeline::align(cfg, seed, &dnn, layer, *map, size, partition, &train_cache, &eval_cache, &test)?;
                let wall_ms = start.elapsed().as_millis() as u64;
                let dir = ctx.layout.map_dir(seed, cfg.algorithm, layer, map, size);
                let (family, d_rn, l_rn) = RunRecord::map_fields(map);
                let meta = MapMeta {
                    family,
                    spec: *map,
                    d: a.map.dim(),
                    l_rn,
                    d_rn,
                    layer,
                    algorithm: cfg.algorithm,
                    partition: a.partition.clone(),
                    epochs: a.das.epochs.len(),
                    seed: seeds::das(seed, layer, map, size),
                };
                let map_path = dir.join("map.json");
                artifacts::save_map(&map_path, &a.map, &meta, &hash)?;
                let curve = dir.join("das.csv");
                let rows: Vec<DasRow> = a
                    .das
                    .epochs
                    .iter()
                    .map(|e: &DasEpoch| DasRow {
                        epoch: e.epoch,
                        train_loss: e.train_loss,
                        eval_loss: e.eval_loss,
                        eval_iia: e.eval_iia,
                        config_hash: &hash,
                    })
                    .collect();
                fsio::write_atomic(&curve, &record::csv_bytes(&rows)?)?;
                let mut iia = a.iia.clone();
                iia.config_hash = hash.clone();
                let iia_path = dir.join("iia.json");
                fsio::write_json(&iia_path, &iia)?;
                log::info!("seed {seed} layer {layer} {map} size {size}: IIA {:.4}", iia.iia);
                let rec = record_for(ctx, Cell { seed, layer, map, size }, &iia, a.das.epochs.len(), wall_ms);
                let mut artifacts = inputs.clone();
                artifacts.extend([map_path.clone(), curve.clone(), iia_path.clone()]);
                out.push((TracedRecord { record: rec, artifacts }, vec![map_path, curve, iia_path]));
            }
        }
        Ok(out)
    })?;
    finish_records(ctx, "train-align", per_cell.into_iter().flatten().collect())
}

fn finish_records(ctx: &Context, command: &str, rows: Vec<(TracedRecord, Vec<PathBuf>)>) -> CliResult<(Vec<PathBuf>, Vec<RunRecord>)> {
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut traced = Vec::new();
    for (t, o) in rows {
        outputs.extend(o);
        traced.push(t);
    }
    let csv = record::write_records(&ctx.layout.records(), &ctx.records_stem(command), command, &ctx.cfg, &traced)?;
    outputs.push(csv.clone());
    outputs.push(csv.with_extension("json"));
    Ok((outputs, traced.into_iter().map(|t| t.record).collect()))
}

/// Scores stored maps on the test split. Identity maps need no checkpoint.
pub fn eval_iia_cmd(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let hash = ctx.hash();
    let cells = seed_layer_cells(cfg);
    let per_cell = jobs::run(&cells, ctx.jobs, |&(seed, layer)| -> CliResult<Vec<(TracedRecord, Vec<PathBuf>)>> {
        let mut inputs = Vec::new();
        let dnn = load_dnn(ctx, seed, &mut inputs)?;
        let test = load_split(ctx, seed, "test", &mut inputs)?;
        let mut search = None;
        let mut out = Vec::new();
        for map in &cfg.maps {
            for &size in &cfg.sizes {
                let start = Instant::now();
                let dir = ctx.layout.map_dir(seed, cfg.algorithm, layer, map, size);
                let checkpoint = dir.join("map.json");
                let mut artifacts = inputs.clone();
                let (phi, partition, epochs) = if *map == MapSpec::Identity && !checkpoint.exists() {
                    let search = match &search {
                        Some(s) => s,
                        None if cfg.partition == crate::config::PartitionMode::Greedy => {
                            search.insert(load_split(ctx, seed, "search", &mut artifacts)?)
                        }
                        None => search.insert(Vec::new()),
                    };
                    let partition = pipeline::partition_for(cfg, &dnn, layer, size, search)?;
                    (AlignmentMap::identity(dnn.layer_dim(layer)?), partition, 0)
                } else {
                    let (phi, meta) = artifacts::load_map(&checkpoint)?;
                    artifacts.push(checkpoint);
                    (phi, meta.partition, meta.epochs)
                };
                let mut iia = eval_iia(&dnn, &phi, &partition, layer, &test, cfg.task_spec(), seed)?;
                iia.config_hash = hash.clone();
                let path = dir.join(format!("eval-{}.json", ctx.cfg.short_hash()));
                fsio::write_json(&path, &iia)?;
                artifacts.push(path.clone());
                let rec = record_for(ctx, Cell { seed, layer, map, size }, &iia, epochs, start.elapsed().as_millis() as u64);
                out.push((TracedRecord { record: rec, artifacts }, vec![path]));
            }
        }
        Ok(out)
    })?;
    Ok(finish_records(ctx, "eval-iia", per_cell.into_iter().flatten().collect())?.0)
}

#[derive(Serialize)]
struct GreedyReport<'a> {
    config_hash: &'a str,
    seed: u64,
    layer: usize,
    algorithm: &'a str,
    search_size: usize,
    test_iia: f64,
    result: GreedyResult,
}

pub fn greedy_id(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let hash = ctx.hash();
    let cells = seed_layer_cells(cfg);
    let per_cell = jobs::run(&cells, ctx.jobs, |&(seed, layer)| -> CliResult<(TracedRecord, Vec<PathBuf>)> {
        let start = Instant::now();
        let mut inputs = Vec::new();
        let dnn = load_dnn(ctx, seed, &mut inputs)?;
        let search = load_split(ctx, seed, "search", &mut inputs)?;
        let test = load_split(ctx, seed, "test", &mut inputs)?;
        let result = greedy_identity_search(&dnn, &cfg.algorithm.model(), layer, cfg.greedy.max_size, &search)?;
        let phi = AlignmentMap::identity(dnn.layer_dim(layer)?);
        let mut iia = eval_iia(&dnn, &phi, &result.partition, layer, &test, cfg.task_spec(), seed)?;
        iia.config_hash = hash.clone();
        let rounds = result.rounds.len();
        let path = ctx.layout.greedy(seed, cfg.algorithm, layer);
        fsio::write_json(
            &path,
            &GreedyReport {
                config_hash: &hash,
                seed,
                layer,
                algorithm: cfg.algorithm.name(),
                search_size: search.len(),
                test_iia: iia.iia,
                result,
            },
        )?;
        let rec = record_for(
            ctx,
            Cell { seed, layer, map: &MapSpec::Identity, size: cfg.greedy.max_size },
            &iia,
            rounds,
            start.elapsed().as_millis() as u64,
        );
        let mut artifacts = inputs;
        artifacts.push(path.clone());
        Ok((TracedRecord { record: rec, artifacts }, vec![path]))
    })?;
    Ok(finish_records(ctx, "greedy-id", per_cell)?.0)
}

/// Data, networks and alignments for the whole grid, then one aggregate
/// CSV with a row per (layer, map, size) cell.
pub fn sweep(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let mut outputs = gen_data(ctx)?;
    outputs.extend(train_dnn(ctx)?);
    let (align_out, records) = train_align(ctx)?;
    outputs.extend(align_out);
    let rows = record::aggregate_records(&records);
    let path = ctx.layout.records().join(format!("{}.csv", ctx.records_stem("sweep-aggregate")));
    fsio::write_atomic(&path, &record::csv_bytes(&rows)?)?;
    outputs.push(path);
    Ok(outputs)
}

pub fn vacuity_demo(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    jobs::run(&cfg.seeds, ctx.jobs, |&seed| {
        let dnn = load_dnn(ctx, seed, &mut Vec::new())?;
        let report = pipeline::vacuity(cfg, seed, &dnn)?;
        log::info!(
            "seed {seed}: {} interventions, IIA {}, mutation IIA {}",
            report.interventions,
            report.iia,
            report.mutation_iia
        );
        let path = ctx.layout.vacuity(seed, cfg.algorithm);
        fsio::write_json(&path, &report)?;
        Ok(path)
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InjectivityReport {
    pub config_hash: String,
    pub seed: u64,
    pub collisions: CollisionReport,
    pub distances: DistanceReport,
}

#[derive(Serialize)]
struct TableRow<'a> {
    representation: String,
    all: String,
    same_output: String,
    not_same_output: String,
    same_variables: String,
    not_same_variables: String,
    n_seeds: usize,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct CollisionRow<'a> {
    seed: u64,
    layer: usize,
    n: usize,
    collisions: u64,
    duplicate_input_pairs: u64,
    config_hash: &'a str,
}

/// Collision counts and the minimal-distance table over seeds.
pub fn injectivity_probe(ctx: &Context) -> CliResult<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    if cfg.task != TaskKind::Heq {
        return Err(CliError::config("injectivity-probe classifies pairs by the heq variables; set task to heq"));
    }
    let hash = ctx.hash();
    let d = &cfg.diagnostics;
    let reports = jobs::run(&cfg.seeds, ctx.jobs, |&seed| -> CliResult<(PathBuf, InjectivityReport)> {
        let dnn = load_dnn(ctx, seed, &mut Vec::new())?;
        let collisions = collision_probe(&dnn, cfg.task_spec(), d.collision_samples, seeds::named(seed, "collisions"))?;
        let distances = min_distance_table(&dnn, d.n_all, d.n_ref, seeds::named(seed, "distances"))?;
        let report = InjectivityReport {
            config_hash: hash.clone(),
            seed,
            collisions,
            distances,
        };
        let path = ctx.layout.injectivity(seed);
        fsio::write_json(&path, &report)?;
        Ok((path, report))
    })?;
    let mut outputs: Vec<PathBuf> = reports.iter().map(|(p, _)| p.clone()).collect();
    let layers = reports[0].1.distances.layers.len();
    let column = |i: usize, f: fn(&ClassMinima) -> f64| -> String {
        let v: Vec<f64> = reports.iter().map(|(_, r)| f(&r.distances.layers[i])).collect();
        record::mean_sd(&v)
    };
    let table: Vec<TableRow> = (0..layers)
        .map(|i| TableRow {
            representation: if i == 0 { "input".into() } else { format!("layer{i}") },
            all: column(i, |m| m.all),
            same_output: column(i, |m| m.same_output),
            not_same_output: column(i, |m| m.not_same_output),
            same_variables: column(i, |m| m.same_variables),
            not_same_variables: column(i, |m| m.not_same_variables),
            n_seeds: reports.len(),
            config_hash: &hash,
        })
        .collect();
    let dir = ctx.layout.records();
    let table_path = dir.join(format!("{}.csv", ctx.records_stem("injectivity-distances")));
    fsio::write_atomic(&table_path, &record::csv_bytes(&table)?)?;
    let collisions: Vec<CollisionRow> = reports
        .iter()
        .flat_map(|(_, r)| {
            r.collisions.collisions.iter().enumerate().map(|(l, &c)| CollisionRow {
                seed: r.seed,
                layer: l + 1,
                n: r.collisions.n,
                collisions: c,
                duplicate_input_pairs: r.collisions.duplicate_input_pairs,
                config_hash: &hash,
            })
        })
        .collect();
    let collisions_path = dir.join(format!("{}.csv", ctx.records_stem("injectivity-collisions")));
    fsio::write_atomic(&collisions_path, &record::csv_bytes(&collisions)?)?;
    outputs.push(table_path);
    outputs.push(collisions_path);
    Ok(outputs)
}
