//! Bijective alignment maps on a layer's activation space, the partitions
//! that assign latent coordinates to algorithm nodes, and the greedy
//! neuron search for the identity map.

mod greedy;
mod orthogonal;
mod partition;
mod revnet;

pub use greedy::{greedy_identity_search, GreedyResult, GreedyRound};
pub use orthogonal::OrthogonalMap;
pub use partition::Partition;
pub use revnet::{RevBlock, RevNetMap, Subnet};

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::rng;

/// Family and hyperparameters of an alignment map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum MapSpec {
    Identity,
    Orthogonal,
    Revnet { layers: usize, hidden: usize },
}

impl MapSpec {
    pub fn family(&self) -> &'static str {
        match self {
            MapSpec::Identity => "identity",
            MapSpec::Orthogonal => "orthogonal",
            MapSpec::Revnet { .. } => "revnet",
        }
    }
}

impl fmt::Display for MapSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSpec::Revnet { layers, hidden } => write!(f, "revnet(L={}, d={})", layers, hidden),
            other => f.write_str(other.family()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AlignmentMap {
    Identity { dim: usize },
    Orthogonal(OrthogonalMap),
    RevNet(RevNetMap),
}

/// An [`AlignmentMap`]'s parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundMap {
    inner: Bound,
}

#[derive(Clone, Debug)]
enum Bound {
    Identity,
    Orthogonal { a: Var, q: Var, qt: Var },
    RevNet(Vec<[Var; 8]>),
}

impl AlignmentMap {
    /// Fresh map of the given family on a `dim`-wide layer. Every family
    /// starts as the identity function.
    pub fn new(spec: &MapSpec, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("alignment map width must be positive".into()));
        }
        Ok(match *spec {
            MapSpec::Identity => AlignmentMap::Identity { dim },
            MapSpec::Orthogonal => AlignmentMap::Orthogonal(OrthogonalMap::new(dim)),
            MapSpec::Revnet { layers, hidden } => {
                let mut r = rng::stream(seed, "map-init");
                AlignmentMap::RevNet(RevNetMap::new(dim, layers, hidden, &mut r)?)
            }
        })
    }

    pub fn identity(dim: usize) -> Self {
        AlignmentMap::Identity { dim }
    }

    pub fn spec(&self) -> MapSpec {
        match self {
            AlignmentMap::Identity { .. } => MapSpec::Identity,
            AlignmentMap::Orthogonal(_) => MapSpec::Orthogonal,
            AlignmentMap::RevNet(r) => MapSpec::Revnet {
                layers: r.layers(),
                hidden: r.hidden(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            AlignmentMap::Identity { dim } => *dim,
            AlignmentMap::Orthogonal(o) => o.dim(),
            AlignmentMap::RevNet(r) => r.dim(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            AlignmentMap::Identity { .. } => vec![],
            AlignmentMap::Orthogonal(o) => vec![o.param()],
            AlignmentMap::RevNet(r) => r.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            AlignmentMap::Identity { .. } => vec![],
            AlignmentMap::Orthogonal(o) => vec![o.param_mut()],
            AlignmentMap::RevNet(r) => r.params_mut(),
        }
    }

    fn check(&self, t: &Tensor, op: &'static str) -> Result<usize> {
        if t.cols() != self.dim() || t.shape().len() > 2 {
            return Err(dim_err(op, format!("map of width {} given shape {:?}", self.dim(), t.shape())));
        }
        Ok(t.rows())
    }

    /// Latent coordinates `z = φ(h)` for every row of `h`.
    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        let rows = self.check(h, "apply")?;
        let data = match self {
            AlignmentMap::Identity { .. } => h.data().to_vec(),
            AlignmentMap::Orthogonal(o) => orthogonal::rows_times_qt(h.data(), &o.materialize()?, rows),
            AlignmentMap::RevNet(r) => r.apply_rows(h.data(), rows),
        };
        Tensor::new(vec![rows, self.dim()], data)
    }

    /// Hidden states `h = φ⁻¹(z)` for every row of `z`.
    pub fn invert(&self, z: &Tensor) -> Result<Tensor> {
        let rows = self.check(z, "invert")?;
        let data = match self {
            AlignmentMap::Identity { .. } => z.data().to_vec(),
            AlignmentMap::Orthogonal(o) => orthogonal::rows_times_q(z.data(), &o.materialize()?, rows),
            AlignmentMap::RevNet(r) => r.invert_rows(z.data(), rows),
        };
        Tensor::new(vec![rows, self.dim()], data)
    }

    /// Register the parameters on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundMap> {
        let inner = match self {
            AlignmentMap::Identity { .. } => Bound::Identity,
            AlignmentMap::Orthogonal(o) => {
                let a = if trainable { tape.param(o.param()) } else { tape.frozen(o.param()) };
                let q = o.tape_q(tape, a)?;
                let qt = tape.transpose(q);
                Bound::Orthogonal { a, q, qt }
            }
            AlignmentMap::RevNet(r) => Bound::RevNet(r.bind(tape, trainable)),
        };
        Ok(BoundMap { inner })
    }

    /// Tape handles matching [`AlignmentMap::params`] order.
    pub fn param_vars(&self, bound: &BoundMap) -> Vec<Var> {
        match &bound.inner {
            Bound::Identity => vec![],
            Bound::Orthogonal { a, .. } => vec![*a],
            Bound::RevNet(vars) => vars.iter().flat_map(|v| v.iter().copied()).collect(),
        }
    }

    pub fn tape_apply(&self, tape: &mut Tape, bound: &BoundMap, h: Var) -> Result<Var> {
        match (&bound.inner, self) {
            (Bound::Identity, _) => Ok(h),
            (Bound::Orthogonal { qt, .. }, _) => tape.matmul(h, *qt),
            (Bound::RevNet(vars), AlignmentMap::RevNet(r)) => r.tape_apply(tape, vars, h),
            _ => Err(Error::Validation("bound parameters belong to a different map".into())),
        }
    }

    pub fn tape_invert(&self, tape: &mut Tape, bound: &BoundMap, z: Var) -> Result<Var> {
        match (&bound.inner, self) {
            (Bound::Identity, _) => Ok(z),
            (Bound::Orthogonal { q, .. }, _) => tape.matmul(z, *q),
            (Bound::RevNet(vars), AlignmentMap::RevNet(r)) => r.tape_invert(tape, vars, z),
            _ => Err(Error::Validation("bound parameters belong to a different map".into())),
        }
    }
}
