//! Interchange interventions through alignment maps, the alignment-search
//! training loop, and interchange intervention accuracy (IIA).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::align::{AlignmentMap, MapSpec, Partition};
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::mlp::{rows_of, strict_argmax, Mlp};
use crate::rng;
use crate::tasks::{AlgorithmId, InterchangeSample, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DasConfig {
    pub layer: usize,
    pub algorithm: AlgorithmId,
    pub map: MapSpec,
    pub intervention_size: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub improve_threshold: f64,
    pub seed: u64,
}

impl DasConfig {
    pub fn new(layer: usize, algorithm: AlgorithmId, map: MapSpec, intervention_size: usize, seed: u64) -> Self {
        Self {
            layer,
            algorithm,
            map,
            intervention_size,
            lr: 1e-3,
            batch: 6400,
            max_epochs: 50,
            patience: 5,
            improve_threshold: 1e-3,
            seed,
        }
    }

    /// Check the configuration against the network it will run on.
    pub fn validate(&self, dnn: &Mlp) -> Result<()> {
        if self.layer == 0 || self.layer > dnn.num_layers() {
            return Err(Error::Config(format!("layer {} outside 1..={}", self.layer, dnn.num_layers())));
        }
        let task = TaskSpec::of(self.algorithm.task());
        if task.input_dim() != dnn.input_dim() {
            return Err(Error::Config(format!(
                "algorithm {} expects inputs of width {}, network takes {}",
                self.algorithm,
                task.input_dim(),
                dnn.input_dim()
            )));
        }
        let width = dnn.layer_dim(self.layer)?;
        let nodes = self.algorithm.model().inner_nodes().len();
        if self.intervention_size == 0 || self.intervention_size * nodes > width {
            return Err(Error::Config(format!(
                "intervention size {} for {} nodes does not fit a layer of width {}",
                self.intervention_size, nodes, width
            )));
        }
        if let MapSpec::Revnet { layers, hidden } = self.map {
            if width % 2 != 0 || layers == 0 || hidden == 0 {
                return Err(Error::Config(format!("RevNet {} cannot act on width {}", self.map, width)));
            }
        }
        if self.batch == 0 || !(self.lr > 0.0 && self.lr.is_finite()) || self.improve_threshold < 0.0 {
            return Err(Error::Config("batch, learning rate and threshold must be positive".into()));
        }
        Ok(())
    }

    /// Contiguous latent slices in inner-node order.
    pub fn partition(&self, dnn: &Mlp) -> Result<Partition> {
        let model = self.algorithm.model();
        Partition::contiguous(dnn.layer_dim(self.layer)?, &model.inner_nodes(), self.intervention_size)
    }
}

/// Hidden states at one layer for the bases and sources of an interchange
/// dataset. The network is frozen, so these never change; the map is
/// applied on top of them at every step.
#[derive(Clone, Debug)]
pub struct HiddenCache {
    pub(crate) layer: usize,
    pub(crate) dim: usize,
    pub(crate) n: usize,
    pub(crate) h_base: Vec<f64>,
    pub(crate) labels: Vec<usize>,
    pub(crate) nodes: Vec<NodeSources>,
}

#[derive(Clone, Debug)]
pub(crate) struct NodeSources {
    pub(crate) node: String,
    /// For every sample, the row of `h_src` holding its source, if any.
    pub(crate) row_of: Vec<Option<usize>>,
    pub(crate) h_src: Vec<f64>,
}

impl HiddenCache {
    /// Run the network up to `layer` on every base and source. Samples may
    /// only intervene on nodes listed in `nodes`.
    pub fn build(dnn: &Mlp, layer: usize, nodes: &[&str], data: &[InterchangeSample]) -> Result<Self> {
        let dim = dnn.layer_dim(layer)?;
        for s in data {
            if let Some(k) = s.sources.keys().find(|k| !nodes.contains(&k.as_str())) {
                return Err(Error::Validation(format!("sample intervenes on {:?}, which has no coordinates", k)));
            }
            if s.x_base.len() != dnn.input_dim() || s.sources.values().any(|x| x.len() != dnn.input_dim()) {
                return Err(dim_err("interchange sample", format!("inputs must have width {}", dnn.input_dim())));
            }
        }
        let h_base = hidden(dnn, layer, data.iter().map(|s| s.x_base.as_slice()), data.len())?;
        let mut out_nodes = Vec::with_capacity(nodes.len());
        for &node in nodes {
            let mut row_of = vec![None; data.len()];
            let mut count = 0;
            for (i, s) in data.iter().enumerate() {
                if s.sources.contains_key(node) {
                    row_of[i] = Some(count);
                    count += 1;
                }
            }
            let h_src = hidden(
                dnn,
                layer,
                data.iter().filter_map(|s| s.sources.get(node).map(Vec::as_slice)),
                count,
            )?;
            out_nodes.push(NodeSources {
                node: node.into(),
                row_of,
                h_src,
            });
        }
        Ok(Self {
            layer,
            dim,
            n: data.len(),
            h_base,
            labels: data.iter().map(|s| s.y_gold).collect(),
            nodes: out_nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    /// How many samples intervene on each node.
    pub fn node_counts(&self) -> BTreeMap<String, usize> {
        self.nodes
            .iter()
            .map(|ns| (ns.node.clone(), ns.row_of.iter().filter(|r| r.is_some()).count()))
            .collect()
    }

    fn cols<'p>(&self, partition: &'p Partition) -> Result<Vec<&'p [usize]>> {
        if partition.layer_dim() != self.dim {
            return Err(dim_err("partition", format!("width {} at a layer of width {}", partition.layer_dim(), self.dim)));
        }
        self.nodes
            .iter()
            .map(|ns| {
                partition
                    .cols_of(&ns.node)
                    .ok_or_else(|| Error::Validation(format!("partition has no coordinates for {:?}", ns.node)))
            })
            .collect()
    }

    /// Logits of the intervened forward pass for samples `idx`.
    pub fn logits(&self, dnn: &Mlp, map: &AlignmentMap, partition: &Partition, idx: &[usize]) -> Result<Tensor> {
        let cols = self.cols(partition)?;
        let d = self.dim;
        let hb = Tensor::new(vec![idx.len(), d], rows_of(idx.iter().map(|&i| &self.h_base[i * d..(i + 1) * d])))?;
        let mut z = map.apply(&hb)?;
        for (ns, cols) in self.nodes.iter().zip(&cols) {
            let (rows, src) = ns.gather(idx, d);
            if rows.is_empty() {
                continue;
            }
            let zs = map.apply(&Tensor::new(vec![rows.len(), d], src)?)?;
            let zd = z.data_mut();
            for (j, &r) in rows.iter().enumerate() {
                for &c in cols.iter() {
                    zd[r * d + c] = zs.data()[j * d + c];
                }
            }
        }
        let h = map.invert(&z)?;
        dnn.logits_from_layer(&h, self.layer)
    }

    /// Mean cross-entropy against the gold labels, and IIA, over every sample.
    pub fn loss_and_iia(&self, dnn: &Mlp, map: &AlignmentMap, partition: &Partition) -> Result<(f64, f64)> {
        if self.n == 0 {
            return Ok((0.0, 0.0));
        }
        let mut loss = 0.0;
        let mut hits = 0usize;
        let all: Vec<usize> = (0..self.n).collect();
        for chunk in all.chunks(8192) {
            let logits = self.logits(dnn, map, partition, chunk)?;
            let c = logits.cols();
            for (row, &i) in logits.data().chunks_exact(c).zip(chunk) {
                loss += cross_entropy(row, self.labels[i]);
                if strict_argmax(row) == Some(self.labels[i]) {
                    hits += 1;
                }
            }
        }
        Ok((loss / self.n as f64, hits as f64 / self.n as f64))
    }

    /// Mean cross-entropy of samples `idx` recorded on `tape`, with the map
    /// trainable and the network frozen.
    pub fn tape_loss(
        &self,
        tape: &mut Tape,
        dnn: &Mlp,
        map: &AlignmentMap,
        bound: &crate::align::BoundMap,
        partition: &Partition,
        idx: &[usize],
    ) -> Result<Var> {
        let cols = self.cols(partition)?;
        let d = self.dim;
        let hb = tape.constant(idx.len(), d, rows_of(idx.iter().map(|&i| &self.h_base[i * d..(i + 1) * d])))?;
        let mut z = map.tape_apply(tape, bound, hb)?;
        for (ns, cols) in self.nodes.iter().zip(&cols) {
            let (rows, src) = ns.gather(idx, d);
            if rows.is_empty() {
                continue;
            }
            let hs = tape.constant(rows.len(), d, src)?;
            let zs = map.tape_apply(tape, bound, hs)?;
            z = tape.overwrite(z, zs, rows, cols.to_vec())?;
        }
        let h = map.tape_invert(tape, bound, z)?;
        let vars = dnn.tape_vars(tape, false);
        let logits = dnn.tape_logits_from_layer(tape, &vars, h, self.layer)?;
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        tape.softmax_cross_entropy(logits, &labels)
    }
}

impl NodeSources {
    /// Batch positions that intervene on this node and their source rows.
    pub(crate) fn gather(&self, idx: &[usize], d: usize) -> (Vec<usize>, Vec<f64>) {
        let mut rows = Vec::new();
        let mut src = Vec::new();
        for (pos, &i) in idx.iter().enumerate() {
            if let Some(r) = self.row_of[i] {
                rows.push(pos);
                src.extend_from_slice(&self.h_src[r * d..(r + 1) * d]);
            }
        }
        (rows, src)
    }
}

fn hidden<'a>(dnn: &Mlp, layer: usize, rows: impl Iterator<Item = &'a [f64]>, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let x = Tensor::new(vec![n, dnn.input_dim()], rows_of(rows))?;
    Ok(dnn.forward_to_layer(&x, layer)?.into_data())
}

/// `−log softmax(row)[label]`, max-stabilised.
pub fn cross_entropy(row: &[f64], label: usize) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| libm::exp(v - mx)).sum();
    -(row[label] - mx - libm::log(z))
}

/// Class probabilities for one interchange sample: the base's latent
/// coordinates owned by each intervened node are replaced with the same
/// coordinates of that node's source, then the network resumes from the
/// inverted state.
pub fn intervened_forward(
    dnn: &Mlp,
    map: &AlignmentMap,
    partition: &Partition,
    sample: &InterchangeSample,
    layer: usize,
) -> Result<Tensor> {
    let nodes: Vec<&str> = partition.node_ids().collect();
    let cache = HiddenCache::build(dnn, layer, &nodes, core::slice::from_ref(sample))?;
    let logits = cache.logits(dnn, map, partition, &[0])?;
    Ok(crate::mlp::softmax_rows(&logits))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DasEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_iia: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DasReport {
    pub epochs: Vec<DasEpoch>,
    pub best_epoch: usize,
    pub best_eval_iia: f64,
    pub steps: u64,
}

/// Fit the map's parameters so interchange interventions on the network
/// reproduce the algorithm's counterfactual labels. The network is never
/// modified. Early stopping watches eval IIA; the best map is kept.
pub fn train_das(
    dnn: &Mlp,
    map: &mut AlignmentMap,
    partition: &Partition,
    train: &[InterchangeSample],
    eval: &[InterchangeSample],
    cfg: &DasConfig,
) -> Result<DasReport> {
    cfg.validate(dnn)?;
    if map.dim() != dnn.layer_dim(cfg.layer)? {
        return Err(dim_err("train_das", format!("map of width {} at layer {}", map.dim(), cfg.layer)));
    }
    if train.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let nodes: Vec<&str> = partition.node_ids().collect();
    let train_cache = HiddenCache::build(dnn, cfg.layer, &nodes, train)?;
    let eval_cache = HiddenCache::build(dnn, cfg.layer, &nodes, eval)?;
    train_das_cached(dnn, map, partition, &train_cache, &eval_cache, cfg)
}

/// [`train_das`] on precomputed hidden states.
pub fn train_das_cached(
    dnn: &Mlp,
    map: &mut AlignmentMap,
    partition: &Partition,
    train: &HiddenCache,
    eval: &HiddenCache,
    cfg: &DasConfig,
) -> Result<DasReport> {
    cfg.validate(dnn)?;
    if train.layer != cfg.layer || eval.layer != cfg.layer {
        return Err(Error::Validation("hidden states were cached at a different layer".into()));
    }
    let mut shuffler = rng::stream(cfg.seed, "das-shuffle");
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let (_, start_iia) = eval.loss_and_iia(dnn, map, partition)?;
    let mut best = (start_iia, 0usize, map.clone());
    let mut stale = 0;
    let mut epochs = Vec::new();
    let trainable = !map.params().is_empty();
    for epoch in 1..=cfg.max_epochs {
        if !trainable {
            break;
        }
        order.shuffle(&mut shuffler);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let bound = map.bind(&mut tape, true)?;
            let loss = train.tape_loss(&mut tape, dnn, map, &bound, partition, idx)?;
            let grads = tape.backward(loss)?;
            let vars = map.param_vars(&bound);
            let mut params = map.params_mut();
            for (p, v) in params.iter_mut().zip(&vars) {
                grads.write_to(*v, p)?;
            }
            opt.step(&mut params)?;
            loss_sum += tape.scalar(loss);
            batches += 1;
        }
        let (eval_loss, eval_iia) = eval.loss_and_iia(dnn, map, partition)?;
        let train_loss = loss_sum / batches as f64;
        log::debug!("das epoch {} loss {:.5} eval_loss {:.5} eval_iia {:.4}", epoch, train_loss, eval_loss, eval_iia);
        epochs.push(DasEpoch {
            epoch,
            train_loss,
            eval_loss,
            eval_iia,
        });
        if eval_iia > best.0 + cfg.improve_threshold {
            best = (eval_iia, epoch, map.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_eval_iia, best_epoch, params) = best;
    *map = params;
    Ok(DasReport {
        epochs,
        best_epoch,
        best_eval_iia,
        steps: opt.steps_taken(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IiaReport {
    pub iia: f64,
    pub n: usize,
    pub node_counts: BTreeMap<String, usize>,
    /// Strict-argmax accuracy of the unpatched network on the bases.
    pub dnn_plain_accuracy: f64,
    /// Filled in by callers that hash their configuration.
    pub config_hash: String,
    pub seed: u64,
}

/// IIA on `test`: the fraction of samples whose intervened prediction has
/// the gold class as its unique maximum.
pub fn eval_iia(
    dnn: &Mlp,
    map: &AlignmentMap,
    partition: &Partition,
    layer: usize,
    test: &[InterchangeSample],
    task: TaskSpec,
    seed: u64,
) -> Result<IiaReport> {
    let nodes: Vec<&str> = partition.node_ids().collect();
    let cache = HiddenCache::build(dnn, layer, &nodes, test)?;
    let (_, iia) = cache.loss_and_iia(dnn, map, partition)?;
    let plain = plain_accuracy(dnn, test, task)?;
    Ok(IiaReport {
        iia,
        n: test.len(),
        node_counts: cache.node_counts(),
        dnn_plain_accuracy: plain,
        config_hash: String::new(),
        seed,
    })
}

fn plain_accuracy(dnn: &Mlp, data: &[InterchangeSample], task: TaskSpec) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let x = Tensor::new(vec![data.len(), dnn.input_dim()], rows_of(data.iter().map(|s| s.x_base.as_slice())))?;
    let pred = dnn.predict(&x)?;
    let hits = pred.iter().zip(data).filter(|(p, s)| **p == Some(task.label(&s.x_base))).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Summary of one sweep cell across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub n: usize,
    pub max: f64,
    pub mean: f64,
    pub sd: f64,
    /// Half-width of the 95% interval `1.96·sd/√n`.
    pub ci95: f64,
}

/// Max, mean and a normal-approximation confidence half-width; `None` for
/// an empty cell.
pub fn aggregate(values: &[f64]) -> Option<CellStats> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sd = if n > 1 {
        libm::sqrt(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
    } else {
        0.0
    };
    Some(CellStats {
        n,
        max,
        mean,
        sd,
        ci95: 1.96 * sd / libm::sqrt(n as f64),
    })
}
