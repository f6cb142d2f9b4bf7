//! Injectivity probes and minimal pairwise distances of hidden states.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::mlp::{rows_of, Mlp};
use crate::rng;
use crate::tasks::TaskSpec;

/// Tile edge for the blocked distance computation.
pub const TILE: usize = 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub n: usize,
    pub seed: u64,
    /// Pairs of inputs that are bit-identical themselves (not counted below).
    pub duplicate_input_pairs: u64,
    /// Per hidden layer, pairs of distinct inputs with bit-identical states.
    pub collisions: Vec<u64>,
}

/// Sample `n` task inputs and count, per hidden layer, the pairs of
/// distinct inputs whose hidden states are bit-identical.
pub fn collision_probe(dnn: &Mlp, task: TaskSpec, n: usize, seed: u64) -> Result<CollisionReport> {
    if n < 2 {
        return Err(Error::Validation("the collision probe needs at least two samples".into()));
    }
    let mut r = rng::stream(seed, "collision-probe");
    let xs: Vec<Vec<f64>> = (0..n).map(|_| task.sample_input(&mut r)).collect();
    collisions_of(dnn, &xs, seed)
}

/// [`collision_probe`] on explicit inputs.
pub fn collisions_of(dnn: &Mlp, xs: &[Vec<f64>], seed: u64) -> Result<CollisionReport> {
    let n = xs.len();
    let input_ids = group_ids(&xs.iter().map(|x| bits(x)).collect::<Vec<_>>());
    let duplicate_input_pairs = pairs_within(&input_ids);
    let x = Tensor::new(vec![n, dnn.input_dim()], rows_of(xs.iter().map(Vec::as_slice)))?;
    let mut collisions = Vec::with_capacity(dnn.num_layers());
    for layer in 1..=dnn.num_layers() {
        let h = dnn.forward_to_layer(&x, layer)?;
        let keys: Vec<Vec<u64>> = h.data().chunks_exact(h.cols()).map(bits).collect();
        let state_ids = group_ids(&keys);
        // pairs sharing a state, minus those that also share the input
        let joint: Vec<usize> = {
            let pairs: Vec<Vec<u64>> = state_ids
                .iter()
                .zip(&input_ids)
                .map(|(&s, &i)| vec![s as u64, i as u64])
                .collect();
            group_ids(&pairs)
        };
        collisions.push(pairs_within(&state_ids) - pairs_within(&joint));
    }
    Ok(CollisionReport {
        n,
        seed,
        duplicate_input_pairs,
        collisions,
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Dense group id per key; equal keys share an id.
fn group_ids(keys: &[Vec<u64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_unstable_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut ids = vec![0; keys.len()];
    let mut next = 0;
    for (pos, &i) in order.iter().enumerate() {
        if pos > 0 && keys[order[pos - 1]] != keys[i] {
            next += 1;
        }
        ids[i] = next;
    }
    ids
}

/// Number of unordered pairs sharing a group id.
fn pairs_within(ids: &[usize]) -> u64 {
    let mut counts = vec![0u64; ids.iter().copied().max().map_or(0, |m| m + 1)];
    for &i in ids {
        counts[i] += 1;
    }
    counts.iter().map(|&c| c * c.saturating_sub(1) / 2).sum()
}

/// Minimal Euclidean distance per pair class at one representation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMinima {
    pub all: f64,
    pub same_output: f64,
    pub not_same_output: f64,
    pub same_variables: f64,
    pub not_same_variables: f64,
}

impl ClassMinima {
    fn empty() -> Self {
        Self {
            all: f64::INFINITY,
            same_output: f64::INFINITY,
            not_same_output: f64::INFINITY,
            same_variables: f64::INFINITY,
            not_same_variables: f64::INFINITY,
        }
    }

    fn sqrt(self) -> Self {
        Self {
            all: libm::sqrt(self.all),
            same_output: libm::sqrt(self.same_output),
            not_same_output: libm::sqrt(self.not_same_output),
            same_variables: libm::sqrt(self.same_variables),
            not_same_variables: libm::sqrt(self.not_same_variables),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// Index 0 is the input itself; index `ℓ` is hidden layer `ℓ`.
    pub layers: Vec<ClassMinima>,
    pub n_all: usize,
    pub n_ref: usize,
    pub seed: u64,
}

/// Ground-truth class of one hierarchical-equality input: the task output
/// and the values of both equality relations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairKey {
    pub output: bool,
    pub variables: (bool, bool),
}

/// Class keys of hierarchical-equality inputs.
pub fn heq_keys(xs: &[Vec<f64>]) -> Vec<PairKey> {
    let eq = |x: &[f64], i: usize| crate::causal::vec_eq(&x[8 * i..8 * i + 4], &x[8 * i + 4..8 * i + 8]);
    xs.iter()
        .map(|x| {
            let v = (eq(x, 0), eq(x, 1));
            PairKey {
                output: v.0 == v.1,
                variables: v,
            }
        })
        .collect()
}

/// Sample `n_all` inputs and a random reference subset of `n_ref` of them,
/// then compute exact minimal distances over all (sample, reference) pairs
/// at the input and at every hidden layer, split by pair class.
pub fn min_distance_table(dnn: &Mlp, n_all: usize, n_ref: usize, seed: u64) -> Result<DistanceReport> {
    if n_ref == 0 || n_ref > n_all {
        return Err(Error::Validation("need 0 < n_ref ≤ n_all".into()));
    }
    let task = TaskSpec::heq();
    if dnn.input_dim() != task.input_dim() {
        return Err(Error::Validation("distance classes are defined for the hierarchical-equality task".into()));
    }
    let mut r = rng::stream(seed, "min-distance");
    let xs: Vec<Vec<f64>> = (0..n_all).map(|_| task.sample_input(&mut r)).collect();
    let mut refs = index::sample(&mut r, n_all, n_ref).into_vec();
    refs.sort_unstable();
    let keys = heq_keys(&xs);
    let x = Tensor::new(vec![n_all, dnn.input_dim()], rows_of(xs.iter().map(Vec::as_slice)))?;
    let mut layers = vec![blocked_minima(x.data(), x.cols(), &refs, &keys)];
    for layer in 1..=dnn.num_layers() {
        let h = dnn.forward_to_layer(&x, layer)?;
        layers.push(blocked_minima(h.data(), h.cols(), &refs, &keys));
    }
    Ok(DistanceReport {
        layers,
        n_all,
        n_ref,
        seed,
    })
}

/// Exact class minima over pairs `(i, r)` with `r ∈ refs`, `i ≠ r`,
/// processed in `TILE × TILE` blocks.
pub fn blocked_minima(points: &[f64], d: usize, refs: &[usize], keys: &[PairKey]) -> ClassMinima {
    let n = points.len() / d;
    let mut m = ClassMinima::empty();
    for ref_tile in refs.chunks(TILE) {
        for start in (0..n).step_by(TILE) {
            for i in start..(start + TILE).min(n) {
                let p = &points[i * d..(i + 1) * d];
                for &j in ref_tile {
                    if i == j {
                        continue;
                    }
                    let dist = squared_distance(p, &points[j * d..(j + 1) * d]);
                    record(&mut m, dist, keys[i], keys[j]);
                }
            }
        }
    }
    m.sqrt()
}

/// `Σ (a_k − b_k)²` in index order.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn record(m: &mut ClassMinima, dist: f64, a: PairKey, b: PairKey) {
    m.all = m.all.min(dist);
    if a.output == b.output {
        m.same_output = m.same_output.min(dist);
    } else {
        m.not_same_output = m.not_same_output.min(dist);
    }
    if a.variables == b.variables {
        m.same_variables = m.same_variables.min(dist);
    } else {
        m.not_same_variables = m.not_same_variables.min(dist);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_counting() {
        let keys = vec![vec![1], vec![2], vec![1], vec![1]];
        let ids = group_ids(&keys);
        assert_eq!(ids[0], ids[2]);
        assert_ne!(ids[0], ids[1]);
        assert_eq!(pairs_within(&ids), 3);
    }

    #[test]
    fn squared_distance_basics() {
        assert_eq!(squared_distance(&[0.0, 3.0], &[4.0, 0.0]), 25.0);
    }
}
