//! The hierarchical-equality and distributive-law tasks, their candidate
//! algorithms, and generators for plain and interchange datasets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::causal::{AlgIntervention, CausalModel, ModelSpec, NodeKind, NodeSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Width of one input block.
pub const BLOCK_DIM: usize = 4;
/// Generators work in shards of this many samples; shard `k` is seeded with
/// `seed ⊕ k`, so output does not depend on how shards are scheduled.
pub const SHARD_SIZE: usize = 8192;
/// Rejection-sampling cap per distributive-law interchange sample.
pub const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// `(x1 == x2) == (x3 == x4)`
    Heq,
    /// `((x1 == x2) ∧ (x3 == x4)) ∨ ((x3 == x4) ∧ (x5 == x6))`
    Dlaw,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Heq => "heq",
            TaskKind::Dlaw => "dlaw",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heq" => Ok(TaskKind::Heq),
            "dlaw" => Ok(TaskKind::Dlaw),
            _ => Err(Error::Validation(format!("unknown task {:?}", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub num_blocks: usize,
    pub block_dim: usize,
}

impl TaskSpec {
    pub fn heq() -> Self {
        Self {
            kind: TaskKind::Heq,
            num_blocks: 4,
            block_dim: BLOCK_DIM,
        }
    }

    pub fn dlaw() -> Self {
        Self {
            kind: TaskKind::Dlaw,
            num_blocks: 6,
            block_dim: BLOCK_DIM,
        }
    }

    pub fn of(kind: TaskKind) -> Self {
        match kind {
            TaskKind::Heq => Self::heq(),
            TaskKind::Dlaw => Self::dlaw(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.num_blocks * self.block_dim
    }

    pub fn num_classes(&self) -> usize {
        2
    }

    fn block<'a>(&self, x: &'a [f64], i: usize) -> &'a [f64] {
        &x[i * self.block_dim..(i + 1) * self.block_dim]
    }

    fn pair_eq(&self, x: &[f64], i: usize) -> bool {
        crate::causal::vec_eq(self.block(x, 2 * i), self.block(x, 2 * i + 1))
    }

    /// Task function `T(x)` as a class index.
    pub fn label(&self, x: &[f64]) -> usize {
        let y = match self.kind {
            TaskKind::Heq => self.pair_eq(x, 0) == self.pair_eq(x, 1),
            TaskKind::Dlaw => {
                let (a, b, c) = (self.pair_eq(x, 0), self.pair_eq(x, 1), self.pair_eq(x, 2));
                (a && b) || (b && c)
            }
        };
        usize::from(y)
    }

    /// Input whose block pairs are equal exactly where `equal[i]` is set.
    /// Equal blocks are copies; unequal blocks are sampled independently.
    fn sample_with_pattern(&self, equal: &[bool], rng: &mut Rng) -> Vec<f64> {
        let d = self.block_dim;
        let mut x = Vec::with_capacity(self.input_dim());
        for &eq in equal {
            let first: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            x.extend_from_slice(&first);
            if eq {
                x.extend_from_slice(&first);
            } else {
                x.extend((0..d).map(|_| rng.random_range(-0.5..0.5)));
            }
        }
        x
    }

    /// One input from the task's sampling distribution: every block pair is
    /// equal with probability 1/2; for the distributive law, rejection
    /// sampling additionally balances the label.
    pub fn sample_input(&self, rng: &mut Rng) -> Vec<f64> {
        let pairs = self.num_blocks / 2;
        match self.kind {
            TaskKind::Heq => {
                let pattern: Vec<bool> = (0..pairs).map(|_| rng.random_bool(0.5)).collect();
                self.sample_with_pattern(&pattern, rng)
            }
            TaskKind::Dlaw => {
                let target = usize::from(rng.random_bool(0.5));
                loop {
                    let pattern: Vec<bool> = (0..pairs).map(|_| rng.random_bool(0.5)).collect();
                    let x = self.sample_with_pattern(&pattern, rng);
                    if self.label(&x) == target {
                        return x;
                    }
                }
            }
        }
    }
}

/// Candidate algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlgorithmId {
    #[serde(rename = "both-eq")]
    BothEq,
    #[serde(rename = "left-eq")]
    LeftEq,
    #[serde(rename = "identity-first")]
    IdentityFirst,
    #[serde(rename = "and-or-and")]
    AndOrAnd,
    #[serde(rename = "and-or")]
    AndOr,
}

impl AlgorithmId {
    pub const ALL: [AlgorithmId; 5] = [
        AlgorithmId::BothEq,
        AlgorithmId::LeftEq,
        AlgorithmId::IdentityFirst,
        AlgorithmId::AndOrAnd,
        AlgorithmId::AndOr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmId::BothEq => "both-eq",
            AlgorithmId::LeftEq => "left-eq",
            AlgorithmId::IdentityFirst => "identity-first",
            AlgorithmId::AndOrAnd => "and-or-and",
            AlgorithmId::AndOr => "and-or",
        }
    }

    pub fn task(self) -> TaskKind {
        match self {
            AlgorithmId::BothEq | AlgorithmId::LeftEq | AlgorithmId::IdentityFirst => TaskKind::Heq,
            AlgorithmId::AndOrAnd | AlgorithmId::AndOr => TaskKind::Dlaw,
        }
    }

    pub fn model(self) -> CausalModel {
        CausalModel::from_spec(&self.spec()).expect("library models are well formed")
    }

    /// The model description of this algorithm.
    pub fn spec(self) -> ModelSpec {
        let task = TaskSpec::of(self.task());
        let mut nodes: Vec<NodeSpec> = (0..task.num_blocks)
            .map(|i| NodeSpec {
                id: format!("x{}", i + 1),
                kind: NodeKind::Input,
                parents: vec![],
                func: "input".into(),
                slice: Some([i * task.block_dim, task.block_dim]),
            })
            .collect();
        let mut add = |id: &str, kind: NodeKind, parents: &[&str], func: &str| {
            nodes.push(NodeSpec {
                id: id.into(),
                kind,
                parents: parents.iter().map(|p| p.to_string()).collect(),
                func: func.into(),
                slice: None,
            })
        };
        use NodeKind::{Inner, Output};
        match self {
            AlgorithmId::BothEq => {
                add("x1==x2", Inner, &["x1", "x2"], "vec_eq");
                add("x3==x4", Inner, &["x3", "x4"], "vec_eq");
                add("y", Output, &["x1==x2", "x3==x4"], "bool_eq");
            }
            AlgorithmId::LeftEq => {
                add("x1==x2", Inner, &["x1", "x2"], "vec_eq");
                add("y", Output, &["x1==x2", "x3", "x4"], "bool_eq_vec_eq");
            }
            AlgorithmId::IdentityFirst => {
                add("v_x1", Inner, &["x1"], "copy");
                add("y", Output, &["v_x1", "x2", "x3", "x4"], "eq_of_eqs");
            }
            AlgorithmId::AndOrAnd => {
                add("(x1==x2)&(x3==x4)", Inner, &["x1", "x2", "x3", "x4"], "and_of_eqs");
                add("(x3==x4)&(x5==x6)", Inner, &["x3", "x4", "x5", "x6"], "and_of_eqs");
                add("y", Output, &["(x1==x2)&(x3==x4)", "(x3==x4)&(x5==x6)"], "or");
            }
            AlgorithmId::AndOr => {
                add("x3==x4", Inner, &["x3", "x4"], "vec_eq");
                add("(x1==x2)|(x5==x6)", Inner, &["x1", "x2", "x5", "x6"], "or_of_eqs");
                add("y", Output, &["x3==x4", "(x1==x2)|(x5==x6)"], "and");
            }
        }
        ModelSpec {
            name: self.name().into(),
            input_dim: task.input_dim(),
            nodes,
        }
    }
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmId::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown algorithm id {:?}", s)))
    }
}

/// All five algorithm models, keyed by id.
pub fn algorithm_library() -> BTreeMap<AlgorithmId, CausalModel> {
    AlgorithmId::ALL.into_iter().map(|a| (a, a.model())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSample {
    pub x: Vec<f64>,
    pub y: usize,
}

/// A base input, one source input per intervened node, and the algorithm's
/// counterfactual output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterchangeSample {
    pub x_base: Vec<f64>,
    pub sources: BTreeMap<String, Vec<f64>>,
    pub y_gold: usize,
}

impl InterchangeSample {
    /// Sample with no intervention: the gold label is the task label.
    pub fn plain(x: Vec<f64>, y: usize) -> Self {
        Self {
            x_base: x,
            sources: BTreeMap::new(),
            y_gold: y,
        }
    }
}

/// Which inner-node subsets interventions target, chosen uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodePolicy {
    /// Every non-empty subset: with two inner nodes, 1/3 each node alone and
    /// 1/3 both; with one inner node, always that node.
    NonEmptySubsets,
    /// Every subset including the empty one (1/4 each with two nodes).
    AllSubsets,
}

/// Base dataset of `n` samples, a pure function of `(task, n, seed)`.
pub fn gen_base_dataset(task: TaskSpec, n: usize, seed: u64) -> Vec<BaseSample> {
    let mut out = Vec::with_capacity(n);
    let mut shard = 0u64;
    while out.len() < n {
        let count = SHARD_SIZE.min(n - out.len());
        out.extend(gen_base_shard(task, count, seed, shard));
        shard += 1;
    }
    out
}

/// One shard of [`gen_base_dataset`].
pub fn gen_base_shard(task: TaskSpec, count: usize, seed: u64, shard: u64) -> Vec<BaseSample> {
    let mut r = rng::stream(rng::shard_seed(seed, shard), "base-dataset");
    (0..count)
        .map(|_| {
            let x = task.sample_input(&mut r);
            let y = task.label(&x);
            BaseSample { x, y }
        })
        .collect()
}

/// Gold label for `x_base` with each `sources[v]`'s clean value of `v`
/// patched into the algorithm.
pub fn gold_label(alg: &CausalModel, x_base: &[f64], sources: &BTreeMap<String, Vec<f64>>) -> Result<usize> {
    let mut iv = AlgIntervention::new();
    for (node, src) in sources {
        iv.insert(node.clone(), alg.run_until(src, &AlgIntervention::new(), node)?);
    }
    alg.evaluate(x_base, &iv)?
        .output
        .as_label()
        .ok_or_else(|| Error::Validation("algorithm output is not a class".into()))
}

/// Interchange dataset of `n` samples, a pure function of its arguments.
pub fn gen_interchange_dataset(
    task: TaskSpec,
    alg: AlgorithmId,
    n: usize,
    seed: u64,
    policy: NodePolicy,
) -> Result<Vec<InterchangeSample>> {
    let mut out = Vec::with_capacity(n);
    let mut shard = 0u64;
    while out.len() < n {
        let count = SHARD_SIZE.min(n - out.len());
        out.extend(gen_interchange_shard(task, alg, count, seed, shard, policy)?);
        shard += 1;
    }
    Ok(out)
}

/// One shard of [`gen_interchange_dataset`].
pub fn gen_interchange_shard(
    task: TaskSpec,
    alg: AlgorithmId,
    count: usize,
    seed: u64,
    shard: u64,
    policy: NodePolicy,
) -> Result<Vec<InterchangeSample>> {
    if alg.task() != task.kind {
        return Err(Error::Validation(format!("algorithm {} does not solve task {}", alg, task.kind)));
    }
    let model = alg.model();
    let inner: Vec<String> = model.inner_nodes().into_iter().map(String::from).collect();
    let k = inner.len();
    let mut r = rng::stream(rng::shard_seed(seed, shard), "interchange-dataset");
    let mut out = Vec::with_capacity(count);
    let subsets = 1u32 << k;
    for _ in 0..count {
        let mask = match policy {
            NodePolicy::NonEmptySubsets => r.random_range(1..subsets),
            NodePolicy::AllSubsets => r.random_range(0..subsets),
        };
        let sample = match task.kind {
            TaskKind::Dlaw if mask != 0 => {
                // the output differs from the base output half of the time
                let want_change = r.random_bool(0.5);
                let mut tries = 0;
                loop {
                    let s = draw_interchange(&task, &model, &inner, mask, &mut r)?;
                    tries += 1;
                    let changed = s.y_gold != task.label(&s.x_base);
                    if changed == want_change || tries >= MAX_REJECTIONS {
                        break s;
                    }
                }
            }
            _ => draw_interchange(&task, &model, &inner, mask, &mut r)?,
        };
        out.push(sample);
    }
    Ok(out)
}

fn draw_interchange(
    task: &TaskSpec,
    model: &CausalModel,
    inner: &[String],
    mask: u32,
    r: &mut Rng,
) -> Result<InterchangeSample> {
    let x_base = task.sample_input(r);
    let mut sources = BTreeMap::new();
    for (i, node) in inner.iter().enumerate() {
        if mask & (1 << i) != 0 {
            sources.insert(node.clone(), task.sample_input(r));
        }
    }
    let y_gold = gold_label(model, &x_base, &sources)?;
    Ok(InterchangeSample { x_base, sources, y_gold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causal::NodeValue;

    fn heq_input(e12: bool, e34: bool) -> Vec<f64> {
        let mut r = rng::stream(1, "t");
        TaskSpec::heq().sample_with_pattern(&[e12, e34], &mut r)
    }

    #[test]
    fn both_equality_examples() {
        let m = AlgorithmId::BothEq.model();
        let x = heq_input(true, true);
        assert_eq!(m.label(&x).unwrap(), 1);

        let x = heq_input(true, false);
        let mut iv = AlgIntervention::new();
        iv.insert("x1==x2".into(), NodeValue::Bool(false));
        assert_eq!(m.evaluate(&x, &iv).unwrap().output, NodeValue::Bool(true));

        let mut iv = AlgIntervention::new();
        iv.insert("y".into(), NodeValue::Bool(false));
        assert_eq!(m.evaluate(&x, &iv).unwrap().output, NodeValue::Bool(false));
    }

    #[test]
    fn run_until_examples() {
        let m = AlgorithmId::BothEq.model();
        let x = heq_input(true, false);
        let none = AlgIntervention::new();
        assert_eq!(m.run_until(&x, &none, "x1==x2").unwrap(), NodeValue::Bool(true));
        assert_eq!(m.run_until(&x, &none, "x3").unwrap(), NodeValue::Vector(x[8..12].to_vec()));
        let mut iv = AlgIntervention::new();
        iv.insert("x1==x2".into(), NodeValue::Bool(false));
        assert_eq!(m.run_until(&x, &iv, "x1==x2").unwrap(), NodeValue::Bool(false));
    }

    #[test]
    fn both_equality_topological_order() {
        let m = AlgorithmId::BothEq.model();
        assert_eq!(m.topo_order(), vec!["x1", "x2", "x3", "x4", "x1==x2", "x3==x4", "y"]);
    }

    #[test]
    fn distributive_law_examples() {
        let mut r = rng::stream(2, "t");
        let x = TaskSpec::dlaw().sample_with_pattern(&[false, true, false], &mut r);
        assert_eq!(AlgorithmId::AndOrAnd.model().label(&x).unwrap(), 0);
        assert_eq!(AlgorithmId::AndOr.model().label(&x).unwrap(), 0);
    }

    #[test]
    fn identity_first_has_vector_inner_node() {
        let m = AlgorithmId::IdentityFirst.model();
        let x = heq_input(false, false);
        let v = m.run_until(&x, &AlgIntervention::new(), "v_x1").unwrap();
        assert_eq!(v, NodeValue::Vector(x[..4].to_vec()));
    }

    #[test]
    fn unknown_algorithm_id() {
        assert!("both-equal".parse::<AlgorithmId>().is_err());
        assert_eq!("and-or".parse::<AlgorithmId>().unwrap(), AlgorithmId::AndOr);
    }

    #[test]
    fn mismatched_task_is_rejected() {
        let r = gen_interchange_dataset(TaskSpec::heq(), AlgorithmId::AndOr, 4, 0, NodePolicy::NonEmptySubsets);
        assert!(r.is_err());
    }

    #[test]
    fn left_eq_always_intervenes_its_node() {
        let d = gen_interchange_dataset(TaskSpec::heq(), AlgorithmId::LeftEq, 500, 3, NodePolicy::NonEmptySubsets)
            .unwrap();
        assert!(d.iter().all(|s| s.sources.len() == 1 && s.sources.contains_key("x1==x2")));
    }
}
