//! Operator graph IR.
//!
//! Graphs are read from a small JSON document:
//!
//! ```json
//! {"tensors": [{"id": "q", "dims": [128, 64], "role": "Q"}, ...],
//!  "nodes":   [{"id": "qk", "kind": "MatMul", "inputs": ["q", "kt"], "outputs": ["a"]}, ...]}
//! ```
//!
//! A [`Graph`] is immutable once built: construction validates referential
//! integrity, single producers, acyclicity and per-kind shapes, and stores
//! nodes in topological order. Rewrites return new graphs.

mod eval;
mod matcher;
mod rewrite;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::GraphError;

pub use eval::{evaluate, graph_inputs, graph_outputs};
pub use matcher::{batch_heads, classify_variant, match_attention, AttentionMatch, AttentionVariant, HeadBinding};
pub use rewrite::{fold_attention, FoldedBinding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TensorRole {
    Q,
    K,
    V,
    Bias,
    Mask,
    Intermediate,
    Output,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDesc {
    pub id: String,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub role: TensorRole,
}

impl TensorDesc {
    pub fn new(id: impl Into<String>, dims: &[usize], role: TensorRole) -> Self {
        Self { id: id.into(), dims: dims.to_vec(), role }
    }

    pub fn elems(&self) -> usize {
        self.dims.iter().product()
    }

    /// Product of the leading (non-matrix) dims.
    pub fn batch(&self) -> usize {
        self.dims[..self.dims.len().saturating_sub(2)].iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    MatMul,
    TransposedMatMul,
    Add,
    SoftMax,
    Transpose,
    Pad,
    FoldedAttention,
    Opaque,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub kind: NodeKind,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

impl Node {
    pub fn new(id: impl Into<String>, kind: NodeKind, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            id: id.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: Value) -> Self {
        self.attrs.insert(key.to_string(), value);
        self
    }

    /// MatMul with a declared transpose of its second operand.
    pub fn transposes_b(&self) -> bool {
        match self.kind {
            NodeKind::TransposedMatMul => true,
            NodeKind::MatMul => self.attrs.get("transpose_b").and_then(Value::as_bool).unwrap_or(false),
            _ => false,
        }
    }

    /// Permutation of a Transpose node; defaults to swapping the last two axes.
    pub fn perm(&self, rank: usize) -> Result<Vec<usize>, GraphError> {
        match self.attrs.get("perm") {
            None => {
                let mut p: Vec<usize> = (0..rank).collect();
                if rank >= 2 {
                    p.swap(rank - 2, rank - 1);
                }
                Ok(p)
            }
            Some(v) => {
                let p: Vec<usize> = serde_json::from_value(v.clone()).map_err(|_| self.schema("perm must be a list of axis indices"))?;
                let mut seen = vec![false; rank];
                if p.len() != rank || p.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
                    return Err(self.schema(&format!("perm {p:?} is not a permutation of {rank} axes")));
                }
                Ok(p)
            }
        }
    }

    /// Normalized softmax axis.
    pub fn axis(&self, rank: usize) -> Result<usize, GraphError> {
        let raw = self.attrs.get("axis").map_or(Some(-1), Value::as_i64).ok_or_else(|| self.schema("axis must be an integer"))?;
        let r = rank as i64;
        let a = if raw < 0 { raw + r } else { raw };
        if !(0..r).contains(&a) {
            return Err(self.schema(&format!("axis {raw} out of range for rank {rank}")));
        }
        Ok(a as usize)
    }

    fn schema(&self, reason: &str) -> GraphError {
        GraphError::Schema { node: self.id.clone(), reason: reason.to_string() }
    }

    fn shape_err(&self, reason: String) -> GraphError {
        GraphError::ShapeMismatch { node: self.id.clone(), reason }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDoc {
    tensors: Vec<TensorDesc>,
    nodes: Vec<Node>,
}

/// Validated, topologically ordered operator graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    tensors: Vec<TensorDesc>,
    tensor_index: HashMap<String, usize>,
    producer: HashMap<String, usize>,
    consumers: HashMap<String, Vec<usize>>,
}

/// Parse and validate a JSON graph document.
pub fn parse_graph(text: &str) -> Result<Graph, GraphError> {
    let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
    Graph::new(doc.tensors, doc.nodes)
}

impl Graph {
    pub fn new(tensors: Vec<TensorDesc>, nodes: Vec<Node>) -> Result<Self, GraphError> {
        let mut tensor_index = HashMap::new();
        for (i, t) in tensors.iter().enumerate() {
            if t.dims.is_empty() || t.dims.contains(&0) {
                return Err(GraphError::BadTensor { tensor: t.id.clone(), reason: format!("dims {:?} must be non-empty with extents >= 1", t.dims) });
            }
            if tensor_index.insert(t.id.clone(), i).is_some() {
                return Err(GraphError::BadTensor { tensor: t.id.clone(), reason: "declared twice".into() });
            }
        }

        let mut node_ids = HashMap::new();
        let mut producer_of: HashMap<&str, usize> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if node_ids.insert(n.id.as_str(), i).is_some() {
                return Err(GraphError::Schema { node: n.id.clone(), reason: "duplicate node id".into() });
            }
            for t in n.inputs.iter().chain(&n.outputs) {
                if !tensor_index.contains_key(t) {
                    return Err(GraphError::UnknownTensor { node: n.id.clone(), tensor: t.clone() });
                }
            }
            for t in &n.outputs {
                if let Some(&first) = producer_of.get(t.as_str()) {
                    return Err(GraphError::MultipleProducers { tensor: t.clone(), first: nodes[first].id.clone(), second: n.id.clone() });
                }
                producer_of.insert(t, i);
            }
        }

        // Kahn's algorithm, always taking the lowest original index that is ready.
        let mut indegree = vec![0usize; nodes.len()];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            for t in &n.inputs {
                if let Some(&p) = producer_of.get(t.as_str()) {
                    succ[p].push(i);
                    indegree[i] += 1;
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &s in &succ[i] {
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    ready.insert(s);
                }
            }
        }
        if order.len() != nodes.len() {
            let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).expect("some node is stuck");
            return Err(GraphError::Cycle { node: nodes[stuck].id.clone() });
        }

        let mut slots: Vec<Option<Node>> = nodes.into_iter().map(Some).collect();
        let nodes: Vec<Node> = order.iter().map(|&i| slots[i].take().expect("each node taken once")).collect();

        let mut producer = HashMap::new();
        let mut consumers: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            for t in &n.outputs {
                producer.insert(t.clone(), i);
            }
            for t in &n.inputs {
                let list = consumers.entry(t.clone()).or_default();
                if list.last() != Some(&i) {
                    list.push(i);
                }
            }
        }

        let g = Self { nodes, tensors, tensor_index, producer, consumers };
        for n in &g.nodes {
            g.check_node(n)?;
        }
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn tensors(&self) -> &[TensorDesc] {
        &self.tensors
    }

    pub fn tensor(&self, id: &str) -> Option<&TensorDesc> {
        self.tensor_index.get(id).map(|&i| &self.tensors[i])
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn producer(&self, tensor: &str) -> Option<&Node> {
        self.producer.get(tensor).map(|&i| &self.nodes[i])
    }

    pub fn consumers(&self, tensor: &str) -> Vec<&Node> {
        self.consumers.get(tensor).map_or_else(Vec::new, |v| v.iter().map(|&i| &self.nodes[i]).collect())
    }

    pub(crate) fn dims(&self, tensor: &str) -> &[usize] {
        &self.tensors[self.tensor_index[tensor]].dims
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph serializes")
    }

    fn to_doc(&self) -> GraphDoc {
        GraphDoc { tensors: self.tensors.clone(), nodes: self.nodes.clone() }
    }

    /// Same tensors and same nodes up to node order.
    pub fn is_isomorphic(&self, other: &Graph) -> bool {
        let mut a: Vec<_> = self.tensors.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
        let mut b: Vec<_> = other.tensors.iter().map(|t| serde_json::to_string(t).unwrap()).collect();
        a.sort();
        b.sort();
        let mut na: Vec<_> = self.nodes.iter().map(|n| serde_json::to_string(n).unwrap()).collect();
        let mut nb: Vec<_> = other.nodes.iter().map(|n| serde_json::to_string(n).unwrap()).collect();
        na.sort();
        nb.sort();
        a == b && na == nb
    }

    fn check_node(&self, n: &Node) -> Result<(), GraphError> {
        let arity = |ins: usize, outs: usize| -> Result<(), GraphError> {
            if n.inputs.len() != ins || n.outputs.len() != outs {
                return Err(n.schema(&format!(
                    "{:?} takes {ins} input(s) and {outs} output(s), got {} and {}",
                    n.kind,
                    n.inputs.len(),
                    n.outputs.len()
                )));
            }
            Ok(())
        };
        let expect_out = |dims: Vec<usize>| -> Result<(), GraphError> {
            let declared = self.dims(&n.outputs[0]);
            if declared != dims.as_slice() {
                return Err(n.shape_err(format!("output `{}` declared {declared:?}, computed {dims:?}", n.outputs[0])));
            }
            Ok(())
        };
        match n.kind {
            NodeKind::MatMul | NodeKind::TransposedMatMul => {
                arity(2, 1)?;
                let out = matmul_dims(self.dims(&n.inputs[0]), self.dims(&n.inputs[1]), n.transposes_b()).map_err(|r| n.shape_err(r))?;
                expect_out(out)
            }
            NodeKind::Add => {
                arity(2, 1)?;
                let out = broadcast_dims(self.dims(&n.inputs[0]), self.dims(&n.inputs[1])).map_err(|r| n.shape_err(r))?;
                expect_out(out)
            }
            NodeKind::SoftMax => {
                arity(1, 1)?;
                let d = self.dims(&n.inputs[0]);
                n.axis(d.len())?;
                expect_out(d.to_vec())
            }
            NodeKind::Transpose => {
                arity(1, 1)?;
                let d = self.dims(&n.inputs[0]);
                let perm = n.perm(d.len())?;
                expect_out(perm.iter().map(|&p| d[p]).collect())
            }
            NodeKind::Pad => {
                arity(1, 1)?;
                let d = self.dims(&n.inputs[0]);
                let pads: Vec<usize> = n
                    .attrs
                    .get("pads")
                    .map(|v| serde_json::from_value(v.clone()))
                    .transpose()
                    .map_err(|_| n.schema("pads must be a list of non-negative integers"))?
                    .unwrap_or_else(|| vec![0; d.len()]);
                if pads.len() != d.len() {
                    return Err(n.schema(&format!("pads has {} entries for rank {}", pads.len(), d.len())));
                }
                expect_out(d.iter().zip(&pads).map(|(a, b)| a + b).collect())
            }
            NodeKind::FoldedAttention => rewrite::check_folded_node(self, n),
            NodeKind::Opaque => Ok(()),
        }
    }
}

/// Batched matmul result dims. The second operand's batch must equal the
/// first's, be 1, or divide it (consecutive groups share one slice).
pub(crate) fn matmul_dims(a: &[usize], b: &[usize], transpose_b: bool) -> Result<Vec<usize>, String> {
    if a.len() < 2 || b.len() < 2 {
        return Err(format!("matmul operands need rank >= 2, got {a:?} and {b:?}"));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if transpose_b { (b[b.len() - 1], b[b.len() - 2]) } else { (b[b.len() - 2], b[b.len() - 1]) };
    if k != kb {
        return Err(format!("inner dims differ: {a:?} x {b:?}{}", if transpose_b { "^T" } else { "" }));
    }
    let ba: usize = a[..a.len() - 2].iter().product();
    let bb: usize = b[..b.len() - 2].iter().product();
    if !ba.is_multiple_of(bb) {
        return Err(format!("batch {bb} of {b:?} does not divide batch {ba} of {a:?}"));
    }
    let mut out = a[..a.len() - 2].to_vec();
    out.extend([m, n]);
    Ok(out)
}

pub(crate) fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>, String> {
    let rank = a.len().max(b.len());
    let at = |d: &[usize], i: usize| if i + d.len() >= rank { d[i + d.len() - rank] } else { 1 };
    (0..rank)
        .map(|i| match (at(a, i), at(b, i)) {
            (x, y) if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            (x, y) => Err(format!("cannot broadcast {a:?} with {b:?} (axis {i}: {x} vs {y})")),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const PREFIX: &str = r#"{
        "tensors": [
            {"id": "q", "dims": [16, 8], "role": "Q"},
            {"id": "kt", "dims": [8, 16]},
            {"id": "a", "dims": [16, 16], "role": "Intermediate"},
            {"id": "s", "dims": [16, 16]}
        ],
        "nodes": [
            {"id": "sm", "kind": "SoftMax", "inputs": ["a"], "outputs": ["s"]},
            {"id": "qk", "kind": "MatMul", "inputs": ["q", "kt"], "outputs": ["a"]}
        ]
    }"#;

    #[test]
    fn minimal_chain_prefix_parses_in_topological_order() {
        let g = parse_graph(PREFIX).unwrap();
        assert_eq!(g.nodes().len(), 2);
        assert_eq!(g.tensors().len(), 4);
        assert_eq!(g.nodes()[0].id, "qk");
        assert_eq!(g.producer("a").unwrap().id, "qk");
        assert_eq!(g.consumers("a")[0].id, "sm");
    }

    #[test]
    fn undeclared_tensor_is_reported_with_node() {
        let doc = PREFIX.replace(r#""inputs": ["a"]"#, r#""inputs": ["ghost"]"#);
        match parse_graph(&doc).unwrap_err() {
            GraphError::UnknownTensor { node, tensor } => assert_eq!((node.as_str(), tensor.as_str()), ("sm", "ghost")),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn cycle_is_detected() {
        let doc = r#"{"tensors": [{"id": "x", "dims": [2, 2]}, {"id": "y", "dims": [2, 2]}],
            "nodes": [{"id": "n1", "kind": "SoftMax", "inputs": ["y"], "outputs": ["x"]},
                      {"id": "n2", "kind": "SoftMax", "inputs": ["x"], "outputs": ["y"]}]}"#;
        assert!(matches!(parse_graph(doc).unwrap_err(), GraphError::Cycle { .. }));
    }

    #[test]
    fn shape_mismatch_names_node() {
        let doc = PREFIX.replace(r#""dims": [8, 16]"#, r#""dims": [4, 16]"#);
        match parse_graph(&doc).unwrap_err() {
            GraphError::ShapeMismatch { node, .. } => assert_eq!(node, "qk"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let err = parse_graph("{\"tensors\": [").unwrap_err();
        assert!(!err.is_validation());
        let err = parse_graph(r#"{"tensors": [], "nodes": [{"id": "n", "kind": "Conv", "inputs": [], "outputs": []}]}"#).unwrap_err();
        assert!(matches!(err, GraphError::Parse(_)));
    }

    #[test]
    fn double_producer_rejected() {
        let doc = r#"{"tensors": [{"id": "x", "dims": [2, 2]}, {"id": "y", "dims": [2, 2]}],
            "nodes": [{"id": "n1", "kind": "SoftMax", "inputs": ["x"], "outputs": ["y"]},
                      {"id": "n2", "kind": "SoftMax", "inputs": ["x"], "outputs": ["y"]}]}"#;
        assert!(matches!(parse_graph(doc).unwrap_err(), GraphError::MultipleProducers { .. }));
    }

    #[test]
    fn serialize_round_trip() {
        let g = parse_graph(PREFIX).unwrap();
        let again = parse_graph(&g.to_json()).unwrap();
        assert!(g.is_isomorphic(&again));
        assert_eq!(g, again);
    }

    #[test]
    fn grouped_matmul_batches() {
        assert_eq!(matmul_dims(&[8, 16, 64], &[2, 64, 32], false).unwrap(), vec![8, 16, 32]);
        assert!(matmul_dims(&[8, 16, 64], &[3, 64, 32], false).is_err());
        assert_eq!(matmul_dims(&[4, 16, 64], &[4, 32, 64], true).unwrap(), vec![4, 16, 32]);
        assert_eq!(broadcast_dims(&[2, 16, 16], &[1, 16]).unwrap(), vec![2, 16, 16]);
    }
}
