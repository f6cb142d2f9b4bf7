//! Classification MLP and its supervised training loops.
//!
//! Layer composition, with `L = hidden_dims.len()` and weights stored as
//! `[in, out]` so that batches are rows:
//!
//! ```text
//! h_1     = x · W_0
//! h_{k+1} = relu(h_k) · W_k + b_k        for 1 ≤ k < L
//! p(y|x)  = softmax(h_L · W_L)
//! ```
//!
//! "Layer ℓ" always names the pre-activation state `h_ℓ`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::align::Partition;
use crate::autodiff::linalg;
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng;
use crate::tasks::{BaseSample, InterchangeSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl MlpConfig {
    /// Three hidden layers of `width` on a `input_dim`-wide input.
    pub fn new(input_dim: usize, width: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![width; 3],
            num_classes: 2,
            seed,
            lr: 1e-3,
            batch: 1024,
            max_epochs: 20,
            patience: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must not be empty".into()));
        }
        if self.input_dim == 0 || self.num_classes < 2 || self.hidden_dims.contains(&0) {
            return Err(Error::Config("layer widths must be positive and num_classes ≥ 2".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    num_classes: usize,
    /// `W_0 … W_L`
    weights: Vec<Tensor>,
    /// `b_1 … b_{L−1}`
    biases: Vec<Tensor>,
}

/// Handles of an [`Mlp`]'s parameters on one tape.
#[derive(Clone, Debug)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl MlpVars {
    /// Handles in [`Mlp::params`] order.
    pub fn all(&self) -> Vec<Var> {
        self.weights.iter().chain(self.biases.iter()).copied().collect()
    }
}

/// Per-epoch training metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_eval_acc: f64,
    /// Seed of the stream that drives the per-epoch shuffles.
    pub shuffle_seed: u64,
}

impl Mlp {
    /// Randomly initialised network: every parameter is drawn from
    /// `uniform(−1/√fan_in, 1/√fan_in)`.
    pub fn new(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, "mlp-init");
        let dims = Self::dims_of(config);
        let mut weights = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let bound = 1.0 / libm::sqrt(w[0] as f64);
            let data = (0..w[0] * w[1]).map(|_| r.random_range(-bound..bound)).collect();
            weights.push(Tensor::new(vec![w[0], w[1]], data)?);
        }
        let mut biases = Vec::new();
        for k in 1..config.hidden_dims.len() {
            let bound = 1.0 / libm::sqrt(config.hidden_dims[k - 1] as f64);
            let data = (0..config.hidden_dims[k]).map(|_| r.random_range(-bound..bound)).collect();
            biases.push(Tensor::new(vec![config.hidden_dims[k]], data)?);
        }
        Ok(Self {
            input_dim: config.input_dim,
            hidden_dims: config.hidden_dims.clone(),
            num_classes: config.num_classes,
            weights,
            biases,
        })
    }

    /// Network with every parameter set to zero.
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        let mut m = Self::new(config)?;
        for t in m.weights.iter_mut().chain(m.biases.iter_mut()) {
            t.data_mut().fill(0.0);
        }
        Ok(m)
    }

    /// Assemble a network from explicit parameters (`[in, out]` weights).
    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        if weights.len() < 2 {
            return Err(Error::Config("an MLP needs at least two weight matrices".into()));
        }
        let mut dims = Vec::with_capacity(weights.len() + 1);
        for (i, w) in weights.iter().enumerate() {
            if w.shape().len() != 2 {
                return Err(dim_err("mlp", format!("weight {} has shape {:?}", i, w.shape())));
            }
            if i == 0 {
                dims.push(w.shape()[0]);
            } else if w.shape()[0] != dims[i] {
                return Err(dim_err("mlp", format!("weight {} expects {} inputs, got {}", i, w.shape()[0], dims[i])));
            }
            dims.push(w.shape()[1]);
        }
        let hidden_dims = dims[1..dims.len() - 1].to_vec();
        if biases.len() + 1 != hidden_dims.len() {
            return Err(dim_err("mlp", format!("{} biases for {} hidden layers", biases.len(), hidden_dims.len())));
        }
        for (k, b) in biases.iter().enumerate() {
            if b.len() != hidden_dims[k + 1] {
                return Err(dim_err("mlp", format!("bias {} has {} values", k + 1, b.len())));
            }
        }
        Ok(Self {
            input_dim: dims[0],
            hidden_dims,
            num_classes: dims[dims.len() - 1],
            weights,
            biases,
        })
    }

    fn dims_of(config: &MlpConfig) -> Vec<usize> {
        let mut d = vec![config.input_dim];
        d.extend_from_slice(&config.hidden_dims);
        d.push(config.num_classes);
        d
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of hidden layers `L`.
    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len()
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    /// Width of hidden layer `layer` (1-based).
    pub fn layer_dim(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.hidden_dims[layer - 1])
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameters in a fixed order: weights, then biases.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().chain(self.biases.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }

    /// Bit patterns of every parameter, for exact comparisons.
    pub fn param_bits(&self) -> Vec<u64> {
        self.params().iter().flat_map(|t| t.bits()).collect()
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.num_layers() {
            return Err(Error::Index(format!("layer {} outside 1..={}", layer, self.num_layers())));
        }
        Ok(())
    }

    fn check_rows(&self, x: &Tensor, width: usize, op: &'static str) -> Result<usize> {
        let rows = x.rows();
        if x.cols() != width || x.shape().len() > 2 {
            return Err(dim_err(op, format!("expected rows of width {}, got shape {:?}", width, x.shape())));
        }
        Ok(rows)
    }

    /// Pre-activation hidden state `h_layer` for every row of `x`.
    pub fn forward_to_layer(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let n = self.check_rows(x, self.input_dim, "forward_to_layer")?;
        let mut h = linalg::matmul(x.data(), self.weights[0].data(), n, self.input_dim, self.hidden_dims[0]);
        for k in 1..layer {
            h = self.step(h, n, k);
        }
        Tensor::new(vec![n, self.hidden_dims[layer - 1]], h)
    }

    /// `h_{k+1}` from `h_k` on raw rows.
    fn step(&self, mut h: Vec<f64>, n: usize, k: usize) -> Vec<f64> {
        linalg::relu_in_place(&mut h);
        let mut out = linalg::matmul(&h, self.weights[k].data(), n, self.hidden_dims[k - 1], self.hidden_dims[k]);
        linalg::add_bias_rows(&mut out, self.biases[k - 1].data());
        out
    }

    /// Logits computed from a (possibly patched) state at `layer`.
    pub fn logits_from_layer(&self, h: &Tensor, layer: usize) -> Result<Tensor> {
        self.check_layer(layer)?;
        let n = self.check_rows(h, self.hidden_dims[layer - 1], "forward_from_layer")?;
        let mut cur = h.data().to_vec();
        for k in layer..self.num_layers() {
            cur = self.step(cur, n, k);
        }
        let l = self.num_layers();
        let logits = linalg::matmul(&cur, self.weights[l].data(), n, self.hidden_dims[l - 1], self.num_classes);
        Tensor::new(vec![n, self.num_classes], logits)
    }

    /// Class probabilities computed from a (possibly patched) state at `layer`.
    pub fn forward_from_layer(&self, h: &Tensor, layer: usize) -> Result<Tensor> {
        let logits = self.logits_from_layer(h, layer)?;
        Ok(softmax_rows(&logits))
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.forward_to_layer(x, 1)?;
        self.logits_from_layer(&h, 1)
    }

    /// Class probabilities for every row of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    /// Strict-argmax prediction per row; `None` when the maximum is tied.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Option<usize>>> {
        let logits = self.logits(x)?;
        Ok(logits.data().chunks_exact(self.num_classes).map(strict_argmax).collect())
    }

    /// Fraction of samples whose strict argmax equals the label.
    pub fn accuracy(&self, data: &[BaseSample]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let (x, y) = pack_base(data, self.input_dim)?;
        let pred = self.predict(&x)?;
        let hits = pred.iter().zip(&y).filter(|(p, y)| **p == Some(**y)).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Put the parameters on `tape`; they receive gradients iff `trainable`.
    pub fn tape_vars(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let reg = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t) } else { tape.frozen(t) };
        MlpVars {
            weights: self.weights.iter().map(|w| reg(tape, w)).collect(),
            biases: self.biases.iter().map(|b| reg(tape, b)).collect(),
        }
    }

    /// Tape version of [`Mlp::forward_to_layer`].
    pub fn tape_to_layer(&self, tape: &mut Tape, vars: &MlpVars, x: Var, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let mut h = tape.matmul(x, vars.weights[0])?;
        for k in 1..layer {
            h = self.tape_step(tape, vars, h, k)?;
        }
        Ok(h)
    }

    fn tape_step(&self, tape: &mut Tape, vars: &MlpVars, h: Var, k: usize) -> Result<Var> {
        let a = tape.relu(h);
        let z = tape.matmul(a, vars.weights[k])?;
        tape.add_bias(z, vars.biases[k - 1])
    }

    /// Tape version of [`Mlp::logits_from_layer`].
    pub fn tape_logits_from_layer(&self, tape: &mut Tape, vars: &MlpVars, h: Var, layer: usize) -> Result<Var> {
        self.check_layer(layer)?;
        let (_, c) = tape.dims(h);
        if c != self.hidden_dims[layer - 1] {
            return Err(dim_err("forward_from_layer", format!("layer {} has width {}, got {}", layer, self.hidden_dims[layer - 1], c)));
        }
        let mut cur = h;
        for k in layer..self.num_layers() {
            cur = self.tape_step(tape, vars, cur, k)?;
        }
        tape.matmul(cur, vars.weights[self.num_layers()])
    }

    /// Supervised training with Adam and cross-entropy, early stopping on
    /// eval accuracy. The best parameters seen are kept.
    pub fn train(&mut self, train: &[BaseSample], eval: &[BaseSample], config: &MlpConfig) -> Result<TrainReport> {
        let wrap = |d: &[BaseSample]| -> Vec<InterchangeSample> {
            d.iter().map(|s| InterchangeSample::plain(s.x.clone(), s.y)).collect()
        };
        self.fit(&wrap(train), &wrap(eval), None, config)
    }

    /// Training where each sample may carry interchange sources: the
    /// partition's neurons at `layer` are overwritten with the source's
    /// activations before the forward pass completes, and gradients reach
    /// the network through base and source paths alike.
    pub fn train_with_interventions(
        &mut self,
        train: &[InterchangeSample],
        eval: &[InterchangeSample],
        layer: usize,
        partition: &Partition,
        config: &MlpConfig,
    ) -> Result<TrainReport> {
        if partition.layer_dim() != self.layer_dim(layer)? {
            return Err(dim_err(
                "train_with_interventions",
                format!("partition for width {} at layer of width {}", partition.layer_dim(), self.hidden_dims[layer - 1]),
            ));
        }
        self.fit(train, eval, Some((layer, partition)), config)
    }

    fn fit(
        &mut self,
        train: &[InterchangeSample],
        eval: &[InterchangeSample],
        plan: Option<(usize, &Partition)>,
        config: &MlpConfig,
    ) -> Result<TrainReport> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        check_sources(train, plan)?;
        check_sources(eval, plan)?;
        let shuffle_seed = rng::stream_seed(config.seed, "mlp-shuffle");
        let mut shuffler = rng::stream(config.seed, "mlp-shuffle");
        let mut opt = Adam::new(AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut best = (f64::NEG_INFINITY, 0usize, self.clone());
        let mut stale = 0;
        let mut epochs = Vec::new();
        for epoch in 1..=config.max_epochs {
            order.shuffle(&mut shuffler);
            let mut loss_sum = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(config.batch) {
                let batch: Vec<&InterchangeSample> = chunk.iter().map(|&i| &train[i]).collect();
                loss_sum += self.sgd_step(&batch, plan, &mut opt)?;
                batches += 1;
            }
            let eval_acc = self.intervened_accuracy(eval, plan)?;
            let loss = loss_sum / batches as f64;
            log::debug!("mlp epoch {} loss {:.6} eval_acc {:.5}", epoch, loss, eval_acc);
            epochs.push(EpochMetrics { epoch, loss, eval_acc });
            if eval_acc > best.0 {
                best = (eval_acc, epoch, self.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
        let (best_eval_acc, best_epoch, params) = best;
        *self = params;
        Ok(TrainReport {
            epochs,
            best_epoch,
            best_eval_acc,
            shuffle_seed,
        })
    }

    fn sgd_step(&mut self, batch: &[&InterchangeSample], plan: Option<(usize, &Partition)>, opt: &mut Adam) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.tape_vars(&mut tape, true);
        let labels: Vec<usize> = batch.iter().map(|s| s.y_gold).collect();
        let x = tape.constant(batch.len(), self.input_dim, rows_of(batch.iter().map(|s| s.x_base.as_slice())))?;
        let logits = match plan {
            None => {
                let h = self.tape_to_layer(&mut tape, &vars, x, 1)?;
                self.tape_logits_from_layer(&mut tape, &vars, h, 1)?
            }
            Some((layer, partition)) => {
                let mut h = self.tape_to_layer(&mut tape, &vars, x, layer)?;
                for (node, cols) in partition.nodes() {
                    let rows: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].sources.contains_key(node)).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let src = rows_of(rows.iter().map(|&i| batch[i].sources[node].as_slice()));
                    let xs = tape.constant(rows.len(), self.input_dim, src)?;
                    let hs = self.tape_to_layer(&mut tape, &vars, xs, layer)?;
                    h = tape.overwrite(h, hs, rows, cols.clone())?;
                }
                self.tape_logits_from_layer(&mut tape, &vars, h, layer)?
            }
        };
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        let grads = tape.backward(loss)?;
        let mut params = self.params_mut();
        let handles: Vec<Var> = vars.weights.iter().chain(vars.biases.iter()).copied().collect();
        for (p, v) in params.iter_mut().zip(&handles) {
            grads.write_to(*v, p)?;
        }
        opt.step(&mut params)?;
        Ok(tape.scalar(loss))
    }

    /// Strict-argmax accuracy against `y_gold` with the identity-map
    /// interventions described by `plan` applied.
    pub fn intervened_accuracy(&self, data: &[InterchangeSample], plan: Option<(usize, &Partition)>) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for chunk in data.chunks(4096) {
            let x = Tensor::new(vec![chunk.len(), self.input_dim], rows_of(chunk.iter().map(|s| s.x_base.as_slice())))?;
            let logits = match plan {
                None => self.logits(&x)?,
                Some((layer, partition)) => {
                    let mut h = self.forward_to_layer(&x, layer)?;
                    let width = h.cols();
                    for (node, cols) in partition.nodes() {
                        let rows: Vec<usize> = (0..chunk.len()).filter(|&i| chunk[i].sources.contains_key(node)).collect();
                        if rows.is_empty() {
                            continue;
                        }
                        let xs = Tensor::new(
                            vec![rows.len(), self.input_dim],
                            rows_of(rows.iter().map(|&i| chunk[i].sources[node].as_slice())),
                        )?;
                        let hs = self.forward_to_layer(&xs, layer)?;
                        let hd = h.data_mut();
                        for (j, &i) in rows.iter().enumerate() {
                            for &c in cols {
                                hd[i * width + c] = hs.data()[j * width + c];
                            }
                        }
                    }
                    self.logits_from_layer(&h, layer)?
                }
            };
            hits += logits
                .data()
                .chunks_exact(self.num_classes)
                .zip(chunk)
                .filter(|(row, s)| strict_argmax(row) == Some(s.y_gold))
                .count();
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

fn check_sources(data: &[InterchangeSample], plan: Option<(usize, &Partition)>) -> Result<()> {
    for s in data {
        for node in s.sources.keys() {
            let known = plan.is_some_and(|(_, p)| p.cols_of(node).is_some());
            if !known {
                return Err(Error::Validation(format!("sample intervenes on {:?}, which has no neurons assigned", node)));
            }
        }
    }
    Ok(())
}

/// Concatenate equally long rows into one row-major buffer.
pub fn rows_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut out = Vec::new();
    for r in rows {
        out.extend_from_slice(r);
    }
    out
}

/// Inputs as one `[n, width]` tensor plus their labels.
pub fn pack_base(data: &[BaseSample], width: usize) -> Result<(Tensor, Vec<usize>)> {
    if let Some(bad) = data.iter().find(|s| s.x.len() != width) {
        return Err(dim_err("pack", format!("input of width {} where {} expected", bad.x.len(), width)));
    }
    let x = Tensor::new(vec![data.len(), width], rows_of(data.iter().map(|s| s.x.as_slice())))?;
    Ok((x, data.iter().map(|s| s.y).collect()))
}

/// Index of the unique largest entry, or `None` on a tie or a NaN.
pub fn strict_argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    let mut tied = false;
    for (i, &v) in row.iter().enumerate() {
        if v.is_nan() {
            return None;
        }
        match best {
            None => best = Some(i),
            Some(b) if v > row[b] => {
                best = Some(i);
                tied = false;
            }
            Some(b) if v == row[b] => tied = true,
            _ => {}
        }
    }
    if tied {
        None
    } else {
        best
    }
}

/// Row-wise, max-stabilised softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(c) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - mx);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}
