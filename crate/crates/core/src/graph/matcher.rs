use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{Graph, Node, NodeKind, TensorRole};
use crate::error::GraphError;
use crate::tiler::{AttentionShape, Sharing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    Mha,
    Gqa,
    Mqa,
}

pub fn classify_variant(num_q_heads: usize, num_kv_heads: usize) -> Result<AttentionVariant, GraphError> {
    if num_kv_heads == 0 || num_q_heads == 0 || !num_q_heads.is_multiple_of(num_kv_heads) {
        return Err(GraphError::HeadGrouping { q_heads: num_q_heads, kv_heads: num_kv_heads });
    }
    Ok(if num_kv_heads == num_q_heads {
        AttentionVariant::Mha
    } else if num_kv_heads == 1 {
        AttentionVariant::Mqa
    } else {
        AttentionVariant::Gqa
    })
}

/// One matched QK^T -> Add* -> SoftMax -> SM*V chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadBinding {
    pub q: String,
    /// Stored as (.., Lk, d) when `k_needs_transpose`, else already (.., d, Lk).
    pub k: String,
    pub v: String,
    pub bias: Option<String>,
    pub mask: Option<String>,
    pub softmax_out: String,
    pub out: String,
    pub qk_node: String,
    pub add_nodes: Vec<String>,
    pub softmax_node: String,
    pub sv_node: String,
    /// Explicit Transpose feeding K that the fold absorbs.
    pub k_transpose_node: Option<String>,
    pub k_needs_transpose: bool,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
    pub bias_batch: usize,
    pub mask_batch: usize,
}

impl HeadBinding {
    /// Chain node ids in dataflow order.
    pub fn chain(&self) -> Vec<String> {
        let mut c = vec![self.qk_node.clone()];
        c.extend(self.add_nodes.iter().cloned());
        c.push(self.softmax_node.clone());
        c.push(self.sv_node.clone());
        c
    }

    fn structure_key(&self) -> (usize, usize, usize, usize, bool, bool, bool) {
        (self.lq, self.lk, self.d, self.dv, self.bias.is_some(), self.mask.is_some(), self.k_needs_transpose)
    }
}

/// A (possibly head-batched) attention block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMatch {
    pub q: String,
    pub k: String,
    pub v: String,
    pub bias: Option<String>,
    pub mask: Option<String>,
    /// Union of all bindings' chain nodes, binding by binding.
    pub chain: Vec<String>,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub variant: AttentionVariant,
    pub k_needs_transpose: bool,
    pub bindings: Vec<HeadBinding>,
}

impl AttentionMatch {
    fn from_bindings(bindings: Vec<HeadBinding>) -> Result<Self, GraphError> {
        let first = bindings.first().expect("at least one binding").clone();
        let num_q_heads = bindings.iter().map(|b| b.q_heads).sum();
        let mut seen_k = HashSet::new();
        let num_kv_heads = bindings.iter().filter(|b| seen_k.insert(b.k.as_str())).map(|b| b.kv_heads).sum();
        let variant = classify_variant(num_q_heads, num_kv_heads)?;
        Ok(Self {
            q: first.q,
            k: first.k,
            v: first.v,
            bias: first.bias,
            mask: first.mask,
            chain: bindings.iter().flat_map(HeadBinding::chain).collect(),
            num_q_heads,
            num_kv_heads,
            variant,
            k_needs_transpose: first.k_needs_transpose,
            bindings,
        })
    }

    /// Aggregate attention shape across all bindings.
    pub fn shape(&self) -> AttentionShape {
        let b = &self.bindings[0];
        let sharing = |pick: fn(&HeadBinding) -> (Option<&String>, usize)| -> Option<Sharing> {
            let mut ids = HashSet::new();
            let mut batch = 0;
            for h in &self.bindings {
                let (id, bt) = pick(h);
                ids.insert(id?.as_str());
                batch = bt;
            }
            Some(if ids.len() == 1 && batch == 1 { Sharing::Shared } else { Sharing::PerHead })
        };
        AttentionShape {
            heads: self.num_q_heads,
            kv_heads: self.num_kv_heads,
            lq: b.lq,
            lk: b.lk,
            d: b.d,
            dv: b.dv,
            bias: sharing(|h| (h.bias.as_ref(), h.bias_batch)),
            mask: sharing(|h| (h.mask.as_ref(), h.mask_batch)),
            k_transpose: self.k_needs_transpose,
        }
    }

    /// All graph nodes a full fold removes: chains plus absorbed K transposes.
    pub fn node_ids(&self) -> Vec<String> {
        let mut ids = self.chain.clone();
        ids.extend(self.bindings.iter().filter_map(|b| b.k_transpose_node.clone()));
        ids
    }
}

fn single_consumer<'g>(g: &'g Graph, tensor: &str) -> Option<&'g Node> {
    match g.consumers(tensor).as_slice() {
        [only] if only.inputs.iter().filter(|t| *t == tensor).count() == 1 => Some(only),
        _ => None,
    }
}

fn swaps_last_two(node: &Node, rank: usize) -> bool {
    let Ok(perm) = node.perm(rank) else { return false };
    rank >= 2
        && perm[rank - 2] == rank - 1
        && perm[rank - 1] == rank - 2
        && perm[..rank - 2].iter().enumerate().all(|(i, &p)| i == p)
}

/// Try to match a chain rooted at a QK^T candidate node.
fn match_from(g: &Graph, qk: &Node, used: &HashSet<&str>) -> Option<HeadBinding> {
    if !matches!(qk.kind, NodeKind::MatMul | NodeKind::TransposedMatMul) {
        return None;
    }
    let q = qk.inputs[0].clone();
    let k_in = &qk.inputs[1];
    let (k, k_needs_transpose, k_transpose_node) = if qk.transposes_b() {
        (k_in.clone(), true, None)
    } else {
        match g.producer(k_in) {
            Some(t)
                if t.kind == NodeKind::Transpose
                    && !used.contains(t.id.as_str())
                    && swaps_last_two(t, g.dims(&t.inputs[0]).len())
                    && single_consumer(g, k_in).is_some_and(|c| c.id == qk.id) =>
            {
                (t.inputs[0].clone(), true, Some(t.id.clone()))
            }
            _ => (k_in.clone(), false, None),
        }
    };

    let score_dims = g.dims(&qk.outputs[0]).to_vec();
    let mut chain_tensors = vec![qk.outputs[0].clone()];
    let mut cur = qk.outputs[0].clone();
    let mut adds: Vec<(&Node, String)> = Vec::new();
    let softmax = loop {
        let next = single_consumer(g, &cur)?;
        if used.contains(next.id.as_str()) {
            return None;
        }
        match next.kind {
            NodeKind::Add if adds.len() < 2 => {
                let other = next.inputs.iter().find(|t| **t != cur)?.clone();
                if chain_tensors.contains(&other) || g.dims(&next.outputs[0]) != score_dims.as_slice() {
                    return None;
                }
                adds.push((next, other));
            }
            NodeKind::SoftMax => {
                let rank = score_dims.len();
                if next.axis(rank).ok()? != rank - 1 {
                    return None;
                }
                break next;
            }
            _ => return None,
        }
        cur = next.outputs[0].clone();
        chain_tensors.push(cur.clone());
    };
    let sm_out = softmax.outputs[0].clone();
    let sv = single_consumer(g, &sm_out)?;
    if used.contains(sv.id.as_str()) || sv.kind != NodeKind::MatMul || sv.transposes_b() || sv.inputs[0] != sm_out {
        return None;
    }
    let v = sv.inputs[1].clone();

    let (bias, mask) = classify_additive(g, &adds, &score_dims);
    let qd = g.dims(&q);
    let vd = g.dims(&v);
    let kd = g.dims(&k);
    let batch = |dims: &[usize]| dims[..dims.len() - 2].iter().product::<usize>();
    let extra_batch = |id: &Option<String>| {
        id.as_ref().map_or(0, |t| {
            let d = g.dims(t);
            d[..d.len().saturating_sub(2)].iter().product::<usize>()
        })
    };
    Some(HeadBinding {
        q_heads: batch(qd),
        kv_heads: batch(kd),
        lq: qd[qd.len() - 2],
        lk: score_dims[score_dims.len() - 1],
        d: qd[qd.len() - 1],
        dv: vd[vd.len() - 1],
        bias_batch: extra_batch(&bias),
        mask_batch: extra_batch(&mask),
        q,
        k,
        v,
        bias,
        mask,
        softmax_out: sm_out,
        out: sv.outputs[0].clone(),
        qk_node: qk.id.clone(),
        add_nodes: adds.iter().map(|(n, _)| n.id.clone()).collect(),
        softmax_node: softmax.id.clone(),
        sv_node: sv.id.clone(),
        k_transpose_node,
        k_needs_transpose,
    })
}

/// Bind additive operands to bias/mask: declared roles first, then shape
/// (full per-head score shape -> mask, broadcast -> bias), then order
/// (first Add is the bias).
fn classify_additive(g: &Graph, adds: &[(&Node, String)], score_dims: &[usize]) -> (Option<String>, Option<String>) {
    #[derive(PartialEq, Clone, Copy)]
    enum Guess {
        Bias,
        Mask,
    }
    let guess = |t: &str| {
        let desc = g.tensor(t).expect("validated tensor");
        match desc.role {
            TensorRole::Bias => Guess::Bias,
            TensorRole::Mask => Guess::Mask,
            _ if desc.dims == score_dims => Guess::Mask,
            _ => Guess::Bias,
        }
    };
    match adds {
        [] => (None, None),
        [(_, t)] => match guess(t) {
            Guess::Bias => (Some(t.clone()), None),
            Guess::Mask => (None, Some(t.clone())),
        },
        [(_, a), (_, b)] => match (guess(a), guess(b)) {
            (Guess::Mask, Guess::Bias) => (Some(b.clone()), Some(a.clone())),
            _ => (Some(a.clone()), Some(b.clone())),
        },
        _ => unreachable!("at most two additive operands"),
    }
}

/// Every non-overlapping attention chain, earliest QK^T first.
pub fn match_attention(g: &Graph) -> Vec<AttentionMatch> {
    let mut used: HashSet<&str> = HashSet::new();
    let mut out = Vec::new();
    for node in g.nodes() {
        if used.contains(node.id.as_str()) {
            continue;
        }
        let Some(binding) = match_from(g, node, &used) else { continue };
        let Ok(m) = AttentionMatch::from_bindings(vec![binding]) else { continue };
        for id in m.node_ids() {
            let stored = g.node(&id).expect("matched node exists");
            used.insert(stored.id.as_str());
        }
        out.push(m);
    }
    out
}

/// Merge matches with identical per-head shapes and operand structure into
/// one batched match per group, in order of first appearance.
pub fn batch_heads(_g: &Graph, matches: &[AttentionMatch]) -> Vec<AttentionMatch> {
    let mut groups: Vec<(_, Vec<&AttentionMatch>)> = Vec::new();
    for m in matches {
        let key = m.bindings[0].structure_key();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(m),
            None => groups.push((key, vec![m])),
        }
    }
    let mut out = Vec::new();
    for (_, members) in groups {
        let bindings: Vec<HeadBinding> = members.iter().flat_map(|m| m.bindings.iter().cloned()).collect();
        match AttentionMatch::from_bindings(bindings) {
            Ok(batched) => out.push(batched),
            Err(_) => out.extend(members.into_iter().cloned()),
        }
    }
    out
}
