use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use serde::{Deserialize, Serialize};

use super::{AlignmentMap, Partition};
use crate::autodiff::Tensor;
use crate::causal::CausalModel;
use crate::das::{cross_entropy, HiddenCache};
use crate::error::{Error, Result};
use crate::mlp::{rows_of, Mlp};
use crate::tasks::InterchangeSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyRound {
    /// Intervention size after this round.
    pub size: usize,
    /// Neuron committed to each node this round.
    pub added: Vec<(String, usize)>,
    pub candidates_evaluated: usize,
    /// Mean cross-entropy of the committed partition on the search set.
    pub loss: f64,
    pub iia: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyResult {
    pub partition: Partition,
    pub rounds: Vec<GreedyRound>,
}

/// Grow one neuron set per inner node of `alg`, one neuron per node per
/// round, choosing additions that minimise the interchange cross-entropy of
/// the identity map on `eval`. With at most two inner nodes every ordered
/// combination of free neurons is scored jointly; with more, nodes are
/// extended one after another.
pub fn greedy_identity_search(
    dnn: &Mlp,
    alg: &CausalModel,
    layer: usize,
    max_size: usize,
    eval: &[InterchangeSample],
) -> Result<GreedyResult> {
    let dim = dnn.layer_dim(layer)?;
    let nodes = alg.inner_nodes();
    if nodes.is_empty() {
        return Err(Error::Config(format!("algorithm {} has no inner nodes", alg.name())));
    }
    if max_size == 0 || max_size * nodes.len() > dim.saturating_sub(1) {
        return Err(Error::Config(format!(
            "greedy search for {} nodes of size {} needs a layer wider than {}, got {}",
            nodes.len(),
            max_size,
            max_size * nodes.len(),
            dim
        )));
    }
    if eval.is_empty() {
        return Err(Error::Validation("greedy search needs a non-empty evaluation set".into()));
    }
    let cache = HiddenCache::build(dnn, layer, &nodes, eval)?;
    let scorer = Scorer { dnn, cache: &cache };
    let mut assign: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    let mut rounds = Vec::with_capacity(max_size);

    for size in 1..=max_size {
        let free: Vec<usize> = (0..dim).filter(|c| !assign.iter().any(|a| a.contains(c))).collect();
        let (added, candidates) = match nodes.len() {
            1 => {
                let rows = scorer.rows_with(&[true]);
                let mut best = (f64::INFINITY, free[0]);
                for &a in &free {
                    let loss = scorer.sum_loss(&[with(&assign[0], a)], &rows);
                    if loss < best.0 {
                        best = (loss, a);
                    }
                }
                (vec![best.1], free.len())
            }
            2 => {
                let only1 = scorer.rows_with(&[true, false]);
                let only2 = scorer.rows_with(&[false, true]);
                let both = scorer.rows_with(&[true, true]);
                let t1: Vec<f64> = free
                    .iter()
                    .map(|&a| scorer.sum_loss(&[with(&assign[0], a), assign[1].clone()], &only1))
                    .collect();
                let t2: Vec<f64> = free
                    .iter()
                    .map(|&b| scorer.sum_loss(&[assign[0].clone(), with(&assign[1], b)], &only2))
                    .collect();
                let mut best = (f64::INFINITY, 0, 0);
                let mut count = 0;
                for (i, &a) in free.iter().enumerate() {
                    for (j, &b) in free.iter().enumerate() {
                        if a == b {
                            continue;
                        }
                        count += 1;
                        let joint = scorer.sum_loss(&[with(&assign[0], a), with(&assign[1], b)], &both);
                        let total = t1[i] + t2[j] + joint;
                        if total < best.0 {
                            best = (total, a, b);
                        }
                    }
                }
                (vec![best.1, best.2], count)
            }
            _ => {
                let all: Vec<usize> = (0..cache.len()).collect();
                let mut count = 0;
                let mut added = Vec::with_capacity(nodes.len());
                for k in 0..nodes.len() {
                    let taken: Vec<usize> = assign.iter().flatten().copied().collect();
                    let mut best = (f64::INFINITY, usize::MAX);
                    for a in (0..dim).filter(|c| !taken.contains(c)) {
                        count += 1;
                        let mut trial = assign.clone();
                        trial[k].push(a);
                        let loss = scorer.sum_loss(&trial, &all);
                        if loss < best.0 {
                            best = (loss, a);
                        }
                    }
                    assign[k].push(best.1);
                    added.push(best.1);
                }
                for a in &mut assign {
                    a.pop();
                }
                (added, count)
            }
        };
        for (a, &c) in assign.iter_mut().zip(&added) {
            a.push(c);
        }
        let partition = to_partition(dim, &nodes, &assign)?;
        let (loss, iia) = cache.loss_and_iia(dnn, &AlignmentMap::identity(dim), &partition)?;
        log::debug!("greedy size {} loss {:.5} iia {:.4}", size, loss, iia);
        rounds.push(GreedyRound {
            size,
            added: nodes.iter().map(|n| String::from(*n)).zip(added).collect(),
            candidates_evaluated: candidates,
            loss,
            iia,
        });
    }
    Ok(GreedyResult {
        partition: to_partition(dim, &nodes, &assign)?,
        rounds,
    })
}

fn with(cols: &[usize], extra: usize) -> Vec<usize> {
    let mut v = cols.to_vec();
    v.push(extra);
    v
}

fn to_partition(dim: usize, nodes: &[&str], assign: &[Vec<usize>]) -> Result<Partition> {
    Partition::new(dim, nodes.iter().map(|n| String::from(*n)).zip(assign.iter().cloned()).collect())
}

struct Scorer<'a> {
    dnn: &'a Mlp,
    cache: &'a HiddenCache,
}

impl Scorer<'_> {
    /// Samples whose intervened-node pattern is exactly `pattern`.
    fn rows_with(&self, pattern: &[bool]) -> Vec<usize> {
        (0..self.cache.len())
            .filter(|&i| self.cache.nodes.iter().zip(pattern).all(|(ns, &p)| ns.row_of[i].is_some() == p))
            .collect()
    }

    /// Summed cross-entropy of `rows` with node `k`'s neurons set to `assign[k]`.
    fn sum_loss(&self, assign: &[Vec<usize>], rows: &[usize]) -> f64 {
        if rows.is_empty() {
            return 0.0;
        }
        let d = self.cache.dim;
        let mut h = rows_of(rows.iter().map(|&i| &self.cache.h_base[i * d..(i + 1) * d]));
        for (ns, cols) in self.cache.nodes.iter().zip(assign) {
            for (pos, &i) in rows.iter().enumerate() {
                if let Some(r) = ns.row_of[i] {
                    for &c in cols {
                        h[pos * d + c] = ns.h_src[r * d + c];
                    }
                }
            }
        }
        let h = Tensor::new(vec![rows.len(), d], h).expect("rows of the layer width");
        let logits = self
            .dnn
            .logits_from_layer(&h, self.cache.layer)
            .expect("cached states match the network");
        let c = logits.cols();
        logits
            .data()
            .chunks_exact(c)
            .zip(rows)
            .map(|(row, &i)| cross_entropy(row, self.cache.labels[i]))
            .sum()
    }
}
