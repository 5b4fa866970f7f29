use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{broadcast_dims, matmul_dims, AttentionMatch, Graph, Node, NodeKind};
use crate::error::GraphError;
use crate::tiler::{FoldingLevel, FoldingPlan};

/// Tensors of one head chain as seen by a `FoldedAttention` node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldedBinding {
    pub q: String,
    /// Original K, stored (.., Lk, d) when the node's `k_needs_transpose` is set.
    pub k: String,
    /// Absent at level 2, where SM*V stays a separate node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Z at level 3, SM_out at level 2.
    pub out: String,
}

/// Replace a matched attention block with one `FoldedAttention` node.
///
/// Level 3 absorbs the whole chain (and any explicit K transpose); level 2
/// leaves the SM*V MatMuls in place and the folded node produces SM_out.
/// Intermediates that lose their producer are dropped from the graph.
pub fn fold_attention(g: &Graph, m: &AttentionMatch, plan: &FoldingPlan) -> Result<Graph, GraphError> {
    let level = plan.folding_level;
    if level < FoldingLevel::SoftmaxFolded {
        return Err(GraphError::InconsistentPlan(format!("cannot fold with a level-{} plan", level.as_u8())));
    }
    let shape = m.shape();
    if plan.shape != shape {
        return Err(GraphError::InconsistentPlan(format!("plan shape {:?} does not match match shape {shape:?}", plan.shape)));
    }
    for id in m.node_ids() {
        if g.node(&id).is_none() {
            return Err(GraphError::InconsistentPlan(format!("matched node `{id}` is not in the graph")));
        }
    }
    let full = level == FoldingLevel::Full;

    let mut removed: HashSet<String> = HashSet::new();
    for b in &m.bindings {
        removed.insert(b.qk_node.clone());
        removed.extend(b.add_nodes.iter().cloned());
        removed.insert(b.softmax_node.clone());
        if full {
            removed.insert(b.sv_node.clone());
        }
        if let Some(t) = &b.k_transpose_node {
            removed.insert(t.clone());
        }
    }

    let bindings: Vec<FoldedBinding> = m
        .bindings
        .iter()
        .map(|b| FoldedBinding {
            q: b.q.clone(),
            k: b.k.clone(),
            v: full.then(|| b.v.clone()),
            bias: b.bias.clone(),
            mask: b.mask.clone(),
            out: if full { b.out.clone() } else { b.softmax_out.clone() },
        })
        .collect();
    let mut inputs: Vec<String> = Vec::new();
    for b in &bindings {
        for t in [Some(&b.q), Some(&b.k), b.v.as_ref(), b.bias.as_ref(), b.mask.as_ref()].into_iter().flatten() {
            if !inputs.contains(t) {
                inputs.push(t.clone());
            }
        }
    }
    let outputs: Vec<String> = bindings.iter().map(|b| b.out.clone()).collect();
    let folded = Node {
        id: format!("folded_{}", m.bindings[0].qk_node),
        kind: NodeKind::FoldedAttention,
        inputs,
        outputs,
        attrs: [
            ("folding_level", json!(level.as_u8())),
            ("variant", serde_json::to_value(m.variant).expect("variant serializes")),
            ("num_q_heads", json!(m.num_q_heads)),
            ("num_kv_heads", json!(m.num_kv_heads)),
            ("k_needs_transpose", json!(m.k_needs_transpose)),
            ("bindings", serde_json::to_value(&bindings).expect("bindings serialize")),
            ("plan", serde_json::to_value(plan).expect("plan serializes")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect(),
    };
    if g.node(&folded.id).is_some() {
        return Err(GraphError::InconsistentPlan(format!("node id `{}` already exists", folded.id)));
    }

    let mut nodes = Vec::with_capacity(g.nodes().len());
    let mut placed = false;
    for n in g.nodes() {
        if removed.contains(&n.id) {
            if !placed {
                nodes.push(folded.clone());
                placed = true;
            }
        } else {
            nodes.push(n.clone());
        }
    }

    let referenced: HashSet<&str> = nodes.iter().flat_map(|n| n.inputs.iter().chain(&n.outputs)).map(String::as_str).collect();
    let orphaned: HashSet<&str> = g
        .nodes()
        .iter()
        .filter(|n| removed.contains(&n.id))
        .flat_map(|n| &n.outputs)
        .map(String::as_str)
        .filter(|t| !referenced.contains(t))
        .collect();
    let tensors = g.tensors().iter().filter(|t| !orphaned.contains(t.id.as_str())).cloned().collect();
    Graph::new(tensors, nodes)
}

/// Decoded attributes of a `FoldedAttention` node.
pub(crate) struct FoldedAttrs {
    pub(crate) level: FoldingLevel,
    pub(crate) k_needs_transpose: bool,
    pub(crate) bindings: Vec<FoldedBinding>,
    pub(crate) plan: FoldingPlan,
}

pub(crate) fn folded_attrs(n: &Node) -> Result<FoldedAttrs, GraphError> {
    let schema = |reason: String| GraphError::Schema { node: n.id.clone(), reason };
    let get = |key: &str| n.attrs.get(key).ok_or_else(|| schema(format!("missing attribute `{key}`")));
    let level_raw = get("folding_level")?.as_u64().ok_or_else(|| schema("folding_level must be an integer".into()))?;
    let level = u8::try_from(level_raw).map_err(|e| schema(e.to_string())).and_then(|v| FoldingLevel::try_from(v).map_err(schema))?;
    if level == FoldingLevel::Unfolded {
        return Err(schema("a FoldedAttention node needs folding_level 2 or 3".into()));
    }
    let k_needs_transpose = match n.attrs.get("k_needs_transpose") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err(schema("k_needs_transpose must be a boolean".into())),
    };
    let bindings: Vec<FoldedBinding> = serde_json::from_value(get("bindings")?.clone()).map_err(|e| schema(format!("bad bindings: {e}")))?;
    if bindings.is_empty() {
        return Err(schema("bindings must not be empty".into()));
    }
    let plan: FoldingPlan = serde_json::from_value(get("plan")?.clone()).map_err(|e| schema(format!("bad plan: {e}")))?;
    if plan.folding_level != level {
        return Err(schema(format!("plan level {} differs from folding_level {}", plan.folding_level.as_u8(), level.as_u8())));
    }
    Ok(FoldedAttrs { level, k_needs_transpose, bindings, plan })
}

pub(crate) fn check_folded_node(g: &Graph, n: &Node) -> Result<(), GraphError> {
    let attrs = folded_attrs(n)?;
    let shape_err = |reason: String| GraphError::ShapeMismatch { node: n.id.clone(), reason };
    let schema = |reason: String| GraphError::Schema { node: n.id.clone(), reason };
    let full = attrs.level == FoldingLevel::Full;
    for (i, b) in attrs.bindings.iter().enumerate() {
        for t in [Some(&b.q), Some(&b.k), b.v.as_ref(), b.bias.as_ref(), b.mask.as_ref()].into_iter().flatten() {
            if !n.inputs.contains(t) {
                return Err(schema(format!("binding {i} tensor `{t}` is not a node input")));
            }
        }
        if n.outputs.get(i) != Some(&b.out) {
            return Err(schema(format!("binding {i} output `{}` is not output #{i}", b.out)));
        }
        if full != b.v.is_some() {
            return Err(schema(format!("binding {i}: V must be bound exactly at level 3")));
        }
        let score = matmul_dims(g.dims(&b.q), g.dims(&b.k), attrs.k_needs_transpose).map_err(shape_err)?;
        for extra in [&b.bias, &b.mask].into_iter().flatten() {
            let merged = broadcast_dims(&score, g.dims(extra)).map_err(shape_err)?;
            if merged != score {
                return Err(shape_err(format!("`{extra}` {:?} does not broadcast into scores {score:?}", g.dims(extra))));
            }
        }
        let expected = match &b.v {
            Some(v) => matmul_dims(&score, g.dims(v), false).map_err(shape_err)?,
            None => score,
        };
        if g.dims(&b.out) != expected.as_slice() {
            return Err(shape_err(format!("output `{}` declared {:?}, computed {expected:?}", b.out, g.dims(&b.out))));
        }
    }
    if n.outputs.len() != attrs.bindings.len() {
        return Err(schema(format!("{} outputs for {} bindings", n.outputs.len(), attrs.bindings.len())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{match_attention, TensorDesc, TensorRole};
    use crate::hw::{default_xdna2_config, KernelGranularity};
    use crate::tiler::{plan_at_level, select_tiling};

    fn bert_like() -> Graph {
        let t = |id: &str, dims: &[usize]| TensorDesc::new(id, dims, TensorRole::Other);
        let tensors = vec![
            t("q", &[2, 16, 8]),
            t("k", &[2, 16, 8]),
            t("v", &[2, 16, 8]),
            t("m", &[1, 16, 16]),
            t("a", &[2, 16, 16]),
            t("am", &[2, 16, 16]),
            t("s", &[2, 16, 16]),
            t("z", &[2, 16, 8]),
            t("y", &[2, 16, 8]),
        ];
        let nodes = vec![
            Node::new("qk", NodeKind::MatMul, &["q", "k"], &["a"]).with_attr("transpose_b", json!(true)),
            Node::new("add", NodeKind::Add, &["a", "m"], &["am"]),
            Node::new("sm", NodeKind::SoftMax, &["am"], &["s"]),
            Node::new("sv", NodeKind::MatMul, &["s", "v"], &["z"]),
            Node::new("post", NodeKind::Opaque, &["z"], &["y"]),
        ];
        Graph::new(tensors, nodes).unwrap()
    }

    #[test]
    fn level3_fold_leaves_one_node_before_consumer() {
        let g = bert_like();
        let m = &match_attention(&g)[0];
        let plan = select_tiling(&m.shape(), &KernelGranularity::default(), &default_xdna2_config()).unwrap();
        let f = fold_attention(&g, m, &plan).unwrap();
        let kinds: Vec<_> = f.nodes().iter().map(|n| n.kind).collect();
        assert_eq!(kinds, vec![NodeKind::FoldedAttention, NodeKind::Opaque]);
        assert!(f.tensor("a").is_none() && f.tensor("s").is_none());
        assert_eq!(f.producer("z").unwrap().kind, NodeKind::FoldedAttention);
    }

    #[test]
    fn level2_fold_keeps_value_matmul() {
        let g = bert_like();
        let m = &match_attention(&g)[0];
        let plan = plan_at_level(&m.shape(), &KernelGranularity::default(), &default_xdna2_config(), FoldingLevel::SoftmaxFolded)
            .unwrap()
            .unwrap();
        let f = fold_attention(&g, m, &plan).unwrap();
        assert_eq!(f.producer("s").unwrap().kind, NodeKind::FoldedAttention);
        assert_eq!(f.producer("z").unwrap().id, "sv");
        assert!(f.tensor("am").is_none());
    }

    #[test]
    fn unfolded_or_mismatched_plans_are_rejected() {
        let g = bert_like();
        let m = &match_attention(&g)[0];
        let gran = KernelGranularity::default();
        let cfg = default_xdna2_config();
        let l1 = plan_at_level(&m.shape(), &gran, &cfg, FoldingLevel::Unfolded).unwrap().unwrap();
        assert!(matches!(fold_attention(&g, m, &l1), Err(GraphError::InconsistentPlan(_))));
        let mut other = m.shape();
        other.lk = 32;
        let wrong = select_tiling(&other, &gran, &cfg).unwrap();
        assert!(matches!(fold_attention(&g, m, &wrong), Err(GraphError::InconsistentPlan(_))));
    }

    #[test]
    fn folded_graph_round_trips_through_json() {
        let g = bert_like();
        let m = &match_attention(&g)[0];
        let plan = select_tiling(&m.shape(), &KernelGranularity::default(), &default_xdna2_config()).unwrap();
        let f = fold_attention(&g, m, &plan).unwrap();
        let back = crate::graph::parse_graph(&f.to_json()).unwrap();
        assert!(back.is_isomorphic(&f));
    }
}
