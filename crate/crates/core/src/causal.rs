//! Deterministic causal models: a DAG of named nodes, each computing its value
//! from its parents with a registered pure function, evaluated under
//! interventions that pin node values.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Input,
    Inner,
    Output,
}

impl NodeKind {
    fn rank(self) -> u8 {
        match self {
            NodeKind::Input => 0,
            NodeKind::Inner => 1,
            NodeKind::Output => 2,
        }
    }
}

/// Type of value a node holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Bool,
    Vector(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeValue {
    Bool(bool),
    Vector(Vec<f64>),
    Label(usize),
}

impl NodeValue {
    pub fn kind(&self) -> Option<ValueKind> {
        match self {
            NodeValue::Bool(_) => Some(ValueKind::Bool),
            NodeValue::Vector(v) => Some(ValueKind::Vector(v.len())),
            NodeValue::Label(_) => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            NodeValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    /// Class index: `false → 0`, `true → 1`, labels as-is.
    pub fn as_label(&self) -> Option<usize> {
        match self {
            NodeValue::Bool(b) => Some(usize::from(*b)),
            NodeValue::Label(l) => Some(*l),
            NodeValue::Vector(_) => None,
        }
    }

    /// Bit-exact equality (vectors compare by `f64` bit pattern).
    pub fn same(&self, other: &NodeValue) -> bool {
        match (self, other) {
            (NodeValue::Vector(a), NodeValue::Vector(b)) => vec_eq(a, b),
            _ => self == other,
        }
    }
}

/// Exact bitwise equality of two vectors.
pub fn vec_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.to_bits() == q.to_bits())
}

/// Registered node functions. Models refer to them by name so that model
/// descriptions stay serializable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeFn {
    /// Reads `len` input coordinates starting at `start`.
    Input { start: usize, len: usize },
    /// `a == b` on two vectors.
    VecEq,
    /// `a == b` on two booleans.
    BoolEq,
    And,
    Or,
    /// Passes its single parent through.
    Copy,
    /// `(a == b) ∧ (c == d)` on four vectors.
    AndOfEqs,
    /// `(a == b) ∨ (c == d)` on four vectors.
    OrOfEqs,
    /// `p == (c == d)` on a boolean and two vectors.
    BoolEqVecEq,
    /// `(a == b) == (c == d)` on four vectors.
    EqOfEqs,
}

impl NodeFn {
    pub fn name(self) -> &'static str {
        match self {
            NodeFn::Input { .. } => "input",
            NodeFn::VecEq => "vec_eq",
            NodeFn::BoolEq => "bool_eq",
            NodeFn::And => "and",
            NodeFn::Or => "or",
            NodeFn::Copy => "copy",
            NodeFn::AndOfEqs => "and_of_eqs",
            NodeFn::OrOfEqs => "or_of_eqs",
            NodeFn::BoolEqVecEq => "bool_eq_vec_eq",
            NodeFn::EqOfEqs => "eq_of_eqs",
        }
    }

    /// Look up a non-input function by its registered name.
    pub fn from_name(name: &str) -> Option<Self> {
        Some(match name {
            "vec_eq" => NodeFn::VecEq,
            "bool_eq" => NodeFn::BoolEq,
            "and" => NodeFn::And,
            "or" => NodeFn::Or,
            "copy" => NodeFn::Copy,
            "and_of_eqs" => NodeFn::AndOfEqs,
            "or_of_eqs" => NodeFn::OrOfEqs,
            "bool_eq_vec_eq" => NodeFn::BoolEqVecEq,
            "eq_of_eqs" => NodeFn::EqOfEqs,
            _ => return None,
        })
    }

    /// Output kind given the parents' kinds, or `None` when the parents do
    /// not fit the function's signature.
    fn output_kind(self, parents: &[ValueKind]) -> Option<ValueKind> {
        use ValueKind::{Bool, Vector};
        let vecs = |n: usize| parents.len() == n && parents.iter().all(|k| matches!(k, Vector(_)));
        let same_dims = |a: usize, b: usize| parents[a] == parents[b];
        match self {
            NodeFn::Input { len, .. } => parents.is_empty().then_some(Vector(len)),
            NodeFn::VecEq => (vecs(2) && same_dims(0, 1)).then_some(Bool),
            NodeFn::BoolEq | NodeFn::And | NodeFn::Or => {
                (parents.len() == 2 && parents.iter().all(|k| *k == Bool)).then_some(Bool)
            }
            NodeFn::Copy => (parents.len() == 1).then(|| parents[0]),
            NodeFn::AndOfEqs | NodeFn::OrOfEqs | NodeFn::EqOfEqs => {
                (vecs(4) && same_dims(0, 1) && same_dims(2, 3)).then_some(Bool)
            }
            NodeFn::BoolEqVecEq => (parents.len() == 3
                && parents[0] == Bool
                && matches!(parents[1], Vector(_))
                && same_dims(1, 2))
            .then_some(Bool),
        }
    }

    fn apply(self, x: &[f64], p: &[&NodeValue]) -> NodeValue {
        let v = |i: usize| match p[i] {
            NodeValue::Vector(v) => v.as_slice(),
            _ => unreachable!("signature checked at construction"),
        };
        let b = |i: usize| p[i].as_bool().expect("signature checked at construction");
        match self {
            NodeFn::Input { start, len } => NodeValue::Vector(x[start..start + len].to_vec()),
            NodeFn::VecEq => NodeValue::Bool(vec_eq(v(0), v(1))),
            NodeFn::BoolEq => NodeValue::Bool(b(0) == b(1)),
            NodeFn::And => NodeValue::Bool(b(0) && b(1)),
            NodeFn::Or => NodeValue::Bool(b(0) || b(1)),
            NodeFn::Copy => p[0].clone(),
            NodeFn::AndOfEqs => NodeValue::Bool(vec_eq(v(0), v(1)) && vec_eq(v(2), v(3))),
            NodeFn::OrOfEqs => NodeValue::Bool(vec_eq(v(0), v(1)) || vec_eq(v(2), v(3))),
            NodeFn::BoolEqVecEq => NodeValue::Bool(b(0) == vec_eq(v(1), v(2))),
            NodeFn::EqOfEqs => NodeValue::Bool(vec_eq(v(0), v(1)) == vec_eq(v(2), v(3))),
        }
    }
}

/// Serializable description of one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub parents: Vec<String>,
    pub func: String,
    /// `[start, len]` of the input slice, for input nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slice: Option<[usize; 2]>,
}

/// Serializable description of a model: the JSON model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_dim: usize,
    pub nodes: Vec<NodeSpec>,
}

#[derive(Clone, Debug)]
struct Node {
    id: String,
    kind: NodeKind,
    parents: Vec<usize>,
    func: NodeFn,
    value: ValueKind,
}

/// Node assignments of an algorithm-side intervention.
pub type AlgIntervention = BTreeMap<String, NodeValue>;

/// Values of every node after one evaluation, in model node order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    values: Vec<NodeValue>,
}

impl Trace {
    pub fn get(&self, index: usize) -> &NodeValue {
        &self.values[index]
    }

    pub fn values(&self) -> &[NodeValue] {
        &self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub output: NodeValue,
    pub trace: Trace,
}

/// An acyclic causal model, immutable after construction.
#[derive(Clone, Debug)]
pub struct CausalModel {
    name: String,
    input_dim: usize,
    nodes: Vec<Node>,
    index: BTreeMap<String, usize>,
    order: Vec<usize>,
    output: usize,
}

impl CausalModel {
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            if index.insert(n.id.clone(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id {:?}", n.id)));
            }
        }
        let mut parents = Vec::with_capacity(spec.nodes.len());
        for n in &spec.nodes {
            let ps = n
                .parents
                .iter()
                .map(|p| {
                    index
                        .get(p)
                        .copied()
                        .ok_or_else(|| Error::Graph(format!("node {:?} has unknown parent {:?}", n.id, p)))
                })
                .collect::<Result<Vec<_>>>()?;
            parents.push(ps);
        }
        for (n, ps) in spec.nodes.iter().zip(&parents) {
            if n.kind == NodeKind::Input && !ps.is_empty() {
                return Err(Error::Graph(format!("input node {:?} has parents", n.id)));
            }
            for &p in ps {
                if spec.nodes[p].kind == NodeKind::Output {
                    return Err(Error::Graph(format!("output node {:?} is a parent of {:?}", spec.nodes[p].id, n.id)));
                }
            }
        }
        let keys: Vec<(u8, &str)> = spec.nodes.iter().map(|n| (n.kind.rank(), n.id.as_str())).collect();
        let order = topo_sort(&parents, &keys)?;

        let mut nodes: Vec<Option<Node>> = spec.nodes.iter().map(|_| None).collect();
        let mut kinds: Vec<Option<ValueKind>> = alloc::vec![None; spec.nodes.len()];
        for &i in &order {
            let n = &spec.nodes[i];
            let func = match (n.kind, n.func.as_str()) {
                (NodeKind::Input, "input") => {
                    let [start, len] = n
                        .slice
                        .ok_or_else(|| Error::Graph(format!("input node {:?} has no slice", n.id)))?;
                    if len == 0 || start + len > spec.input_dim {
                        return Err(Error::Graph(format!(
                            "input node {:?} slice {}..{} outside input of {}",
                            n.id,
                            start,
                            start + len,
                            spec.input_dim
                        )));
                    }
                    NodeFn::Input { start, len }
                }
                (NodeKind::Input, other) => {
                    return Err(Error::Graph(format!("input node {:?} uses function {:?}", n.id, other)))
                }
                (_, name) => NodeFn::from_name(name)
                    .ok_or_else(|| Error::Graph(format!("node {:?} uses unregistered function {:?}", n.id, name)))?,
            };
            let pk: Vec<ValueKind> = parents[i].iter().map(|&p| kinds[p].expect("parents come first")).collect();
            let value = func
                .output_kind(&pk)
                .ok_or_else(|| Error::Graph(format!("node {:?}: parents {:?} do not fit {}", n.id, pk, func.name())))?;
            kinds[i] = Some(value);
            nodes[i] = Some(Node {
                id: n.id.clone(),
                kind: n.kind,
                parents: parents[i].clone(),
                func,
                value,
            });
        }
        let nodes: Vec<Node> = nodes.into_iter().map(|n| n.expect("every node ordered")).collect();
        let outputs: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].kind == NodeKind::Output).collect();
        if outputs.len() != 1 {
            return Err(Error::Graph(format!("expected exactly one output node, found {}", outputs.len())));
        }
        Ok(Self {
            name: spec.name.clone(),
            input_dim: spec.input_dim,
            nodes,
            index,
            order,
            output: outputs[0],
        })
    }

    pub fn to_spec(&self) -> ModelSpec {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeSpec {
                id: n.id.clone(),
                kind: n.kind,
                parents: n.parents.iter().map(|&p| self.nodes[p].id.clone()).collect(),
                func: n.func.name().to_string(),
                slice: match n.func {
                    NodeFn::Input { start, len } => Some([start, len]),
                    _ => None,
                },
            })
            .collect();
        ModelSpec {
            name: self.name.clone(),
            input_dim: self.input_dim,
            nodes,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.nodes[index].id
    }

    pub fn kind(&self, index: usize) -> NodeKind {
        self.nodes[index].kind
    }

    pub fn value_kind(&self, index: usize) -> ValueKind {
        self.nodes[index].value
    }

    pub fn output_index(&self) -> usize {
        self.output
    }

    /// Inner node ids in topological order.
    pub fn inner_nodes(&self) -> Vec<&str> {
        self.order
            .iter()
            .filter(|&&i| self.nodes[i].kind == NodeKind::Inner)
            .map(|&i| self.nodes[i].id.as_str())
            .collect()
    }

    /// Node ids with parents before children; ties broken by kind
    /// (inputs, inner, output) and then by id.
    pub fn topo_order(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }

    /// Resolve and check an intervention into `(node index, value)` pairs.
    pub fn resolve(&self, iv: &AlgIntervention) -> Result<Vec<(usize, NodeValue)>> {
        iv.iter()
            .map(|(id, val)| {
                let i = self
                    .index_of(id)
                    .ok_or_else(|| Error::Validation(format!("intervention on unknown node {:?}", id)))?;
                let node = &self.nodes[i];
                if node.kind == NodeKind::Input {
                    return Err(Error::Validation(format!("intervention on input node {:?}", id)));
                }
                let fits = match val {
                    NodeValue::Label(_) => node.kind == NodeKind::Output,
                    other => other.kind() == Some(node.value),
                };
                if !fits {
                    return Err(Error::Validation(format!("value {:?} does not fit node {:?}", val, id)));
                }
                Ok((i, val.clone()))
            })
            .collect()
    }

    /// Run the model on `x` under `iv`. Intervened nodes take their assigned
    /// value and skip their function.
    pub fn evaluate(&self, x: &[f64], iv: &AlgIntervention) -> Result<Evaluation> {
        let resolved = self.resolve(iv)?;
        self.evaluate_resolved(x, &resolved)
    }

    /// [`evaluate`](Self::evaluate) with an already resolved intervention.
    pub fn evaluate_resolved(&self, x: &[f64], iv: &[(usize, NodeValue)]) -> Result<Evaluation> {
        if x.len() != self.input_dim {
            return Err(Error::Validation(format!(
                "input of length {} for model with input dim {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut values: Vec<Option<NodeValue>> = alloc::vec![None; self.nodes.len()];
        for &i in &self.order {
            let node = &self.nodes[i];
            let v = match iv.iter().find(|(j, _)| *j == i) {
                Some((_, val)) => val.clone(),
                None => {
                    let ps: Vec<&NodeValue> = node
                        .parents
                        .iter()
                        .map(|&p| values[p].as_ref().expect("parents evaluated first"))
                        .collect();
                    node.func.apply(x, &ps)
                }
            };
            values[i] = Some(v);
        }
        let values: Vec<NodeValue> = values.into_iter().map(|v| v.expect("all evaluated")).collect();
        Ok(Evaluation {
            output: values[self.output].clone(),
            trace: Trace { values },
        })
    }

    /// Value of node `id` when running on `x` under `iv`.
    pub fn run_until(&self, x: &[f64], iv: &AlgIntervention, id: &str) -> Result<NodeValue> {
        let i = self
            .index_of(id)
            .ok_or_else(|| Error::Validation(format!("unknown node {:?}", id)))?;
        Ok(self.evaluate(x, iv)?.trace.values[i].clone())
    }

    /// Output class of the clean run on `x`.
    pub fn label(&self, x: &[f64]) -> Result<usize> {
        let out = self.evaluate_resolved(x, &[])?.output;
        out.as_label()
            .ok_or_else(|| Error::Validation("output node is not a class".into()))
    }
}

/// Kahn's algorithm; among ready nodes the smallest key goes first.
fn topo_sort(parents: &[Vec<usize>], keys: &[(u8, &str)]) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut children: Vec<Vec<usize>> = alloc::vec![Vec::new(); n];
    let mut indeg = alloc::vec![0usize; n];
    for (c, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(c);
            indeg[c] += 1;
        }
    }
    let mut ready: BTreeSet<((u8, &str), usize)> = (0..n).filter(|&i| indeg[i] == 0).map(|i| (keys[i], i)).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(i);
        for &c in &children[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.insert((keys[c], c));
            }
        }
    }
    if order.len() != n {
        return Err(Error::Graph("cycle detected".into()));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn input(id: &str, start: usize) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            kind: NodeKind::Input,
            parents: vec![],
            func: "input".into(),
            slice: Some([start, 1]),
        }
    }

    fn node(id: &str, kind: NodeKind, parents: &[&str], func: &str) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            kind,
            parents: parents.iter().map(|p| p.to_string()).collect(),
            func: func.into(),
            slice: None,
        }
    }

    fn chain() -> ModelSpec {
        ModelSpec {
            name: "chain".into(),
            input_dim: 1,
            nodes: vec![
                node("c", NodeKind::Output, &["b"], "copy"),
                input("a", 0),
                node("b", NodeKind::Inner, &["a"], "copy"),
            ],
        }
    }

    #[test]
    fn chain_orders_parents_first() {
        let m = CausalModel::from_spec(&chain()).unwrap();
        assert_eq!(m.topo_order(), vec!["a", "b", "c"]);
    }

    #[test]
    fn cycle_is_a_graph_error() {
        let spec = ModelSpec {
            name: "cyc".into(),
            input_dim: 1,
            nodes: vec![
                input("a", 0),
                node("b", NodeKind::Inner, &["c"], "copy"),
                node("c", NodeKind::Inner, &["b"], "copy"),
                node("y", NodeKind::Output, &["c"], "copy"),
            ],
        };
        assert!(matches!(CausalModel::from_spec(&spec), Err(Error::Graph(_))));
    }

    #[test]
    fn malformed_graphs_are_rejected() {
        let mut s = chain();
        s.nodes.push(node("b", NodeKind::Inner, &["a"], "copy"));
        assert!(CausalModel::from_spec(&s).is_err(), "duplicate id");

        let mut s = chain();
        s.nodes[2].func = "nope".into();
        assert!(CausalModel::from_spec(&s).is_err(), "unregistered function");

        let mut s = chain();
        s.nodes.push(node("d", NodeKind::Inner, &["c"], "copy"));
        assert!(CausalModel::from_spec(&s).is_err(), "output used as parent");

        let mut s = chain();
        s.nodes[2].func = "and".into();
        assert!(CausalModel::from_spec(&s).is_err(), "signature mismatch");
    }

    #[test]
    fn intervention_validation() {
        let m = CausalModel::from_spec(&chain()).unwrap();
        let mut iv = AlgIntervention::new();
        iv.insert("zz".into(), NodeValue::Bool(true));
        assert!(matches!(m.evaluate(&[1.0], &iv), Err(Error::Validation(_))));
        let mut iv = AlgIntervention::new();
        iv.insert("a".into(), NodeValue::Vector(vec![2.0]));
        assert!(m.evaluate(&[1.0], &iv).is_err(), "inputs cannot be assigned");
        let mut iv = AlgIntervention::new();
        iv.insert("b".into(), NodeValue::Vector(vec![2.0, 3.0]));
        assert!(m.evaluate(&[1.0], &iv).is_err(), "dimension must match");
        let mut iv = AlgIntervention::new();
        iv.insert("b".into(), NodeValue::Vector(vec![2.0]));
        let out = m.evaluate(&[1.0], &iv).unwrap().output;
        assert_eq!(out, NodeValue::Vector(vec![2.0]));
    }

    #[test]
    fn spec_round_trip() {
        let m = CausalModel::from_spec(&chain()).unwrap();
        let again = CausalModel::from_spec(&m.to_spec()).unwrap();
        assert_eq!(again.topo_order(), m.topo_order());
    }
}
