use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assignment of disjoint latent coordinates to algorithm nodes. Every node
/// receives the same number of coordinates (the intervention size); the
/// coordinates nobody owns form the unused set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    layer_dim: usize,
    nodes: Vec<(String, Vec<usize>)>,
}

impl Partition {
    pub fn new(layer_dim: usize, nodes: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut names = BTreeSet::new();
        let size = nodes.first().map(|(_, c)| c.len());
        for (name, cols) in &nodes {
            if !names.insert(name.as_str()) {
                return Err(Error::Validation(format!("node {:?} appears twice in the partition", name)));
            }
            if cols.is_empty() {
                return Err(Error::Validation(format!("node {:?} has no coordinates", name)));
            }
            if Some(cols.len()) != size {
                return Err(Error::Validation("all nodes must have the same intervention size".into()));
            }
            for &c in cols {
                if c >= layer_dim {
                    return Err(Error::Validation(format!("coordinate {} outside layer of width {}", c, layer_dim)));
                }
                if !seen.insert(c) {
                    return Err(Error::Validation(format!("coordinate {} assigned twice", c)));
                }
            }
        }
        Ok(Self { layer_dim, nodes })
    }

    /// Consecutive blocks of `size` coordinates in node order, starting at 0.
    pub fn contiguous(layer_dim: usize, nodes: &[&str], size: usize) -> Result<Self> {
        if size == 0 || size * nodes.len() > layer_dim {
            return Err(Error::Config(format!(
                "{} nodes of size {} do not fit a layer of width {}",
                nodes.len(),
                size,
                layer_dim
            )));
        }
        Self::new(
            layer_dim,
            nodes
                .iter()
                .enumerate()
                .map(|(i, n)| (String::from(*n), (i * size..(i + 1) * size).collect()))
                .collect(),
        )
    }

    pub fn layer_dim(&self) -> usize {
        self.layer_dim
    }

    pub fn nodes(&self) -> &[(String, Vec<usize>)] {
        &self.nodes
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(|(n, _)| n.as_str())
    }

    pub fn cols_of(&self, node: &str) -> Option<&[usize]> {
        self.nodes.iter().find(|(n, _)| n == node).map(|(_, c)| c.as_slice())
    }

    pub fn intervention_size(&self) -> usize {
        self.nodes.first().map_or(0, |(_, c)| c.len())
    }

    /// Coordinates not owned by any node, ascending.
    pub fn unused(&self) -> Vec<usize> {
        let used: BTreeSet<usize> = self.nodes.iter().flat_map(|(_, c)| c.iter().copied()).collect();
        (0..self.layer_dim).filter(|c| !used.contains(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn contiguous_layout() {
        let p = Partition::contiguous(16, &["a", "b"], 4).unwrap();
        assert_eq!(p.cols_of("b").unwrap(), &[4, 5, 6, 7]);
        assert_eq!(p.unused(), (8..16).collect::<Vec<_>>());
        assert_eq!(p.intervention_size(), 4);
    }

    #[test]
    fn invalid_partitions() {
        assert!(Partition::new(4, vec![("a".into(), vec![0, 1]), ("b".into(), vec![1, 2])]).is_err());
        assert!(Partition::new(4, vec![("a".into(), vec![])]).is_err());
        assert!(Partition::new(4, vec![("a".into(), vec![4])]).is_err());
        assert!(Partition::new(4, vec![("a".into(), vec![0]), ("b".into(), vec![1, 2])]).is_err());
        assert!(Partition::contiguous(8, &["a", "b"], 5).is_err());
    }
}
