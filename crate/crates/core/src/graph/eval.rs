//! Reference interpreter: evaluates a graph node by node in double precision.
//! `FoldedAttention` nodes run through the folded simulator, one binding at a
//! time.

use std::collections::BTreeMap;

use super::rewrite::{folded_attrs, FoldedBinding};
use super::{Graph, Node, NodeKind, TensorDesc};
use crate::error::GraphError;
use crate::hw::NpuConfig;
use crate::parallel::ExecMode;
use crate::sim::{crop_output, execute_folded_with, execute_softmax_stage, AttentionInputs};
use crate::tensor::Tensor;
use crate::tiler::{AttentionShape, FoldingLevel, FoldingPlan, Sharing};

/// Tensors no node produces, in declaration order.
pub fn graph_inputs(g: &Graph) -> Vec<&TensorDesc> {
    g.tensors().iter().filter(|t| g.producer(&t.id).is_none()).collect()
}

/// Produced tensors no node consumes, in declaration order.
pub fn graph_outputs(g: &Graph) -> Vec<&TensorDesc> {
    g.tensors()
        .iter()
        .filter(|t| g.producer(&t.id).is_some() && g.consumers(&t.id).is_empty())
        .collect()
}

/// Evaluate every node; returns the value of every tensor (feeds included).
pub fn evaluate(g: &Graph, feeds: &BTreeMap<String, Tensor>, cfg: &NpuConfig) -> Result<BTreeMap<String, Tensor>, GraphError> {
    let mut env = BTreeMap::new();
    for t in graph_inputs(g) {
        let value = feeds
            .get(&t.id)
            .ok_or_else(|| GraphError::BadTensor { tensor: t.id.clone(), reason: "no value fed for graph input".into() })?;
        if value.dims() != t.dims.as_slice() {
            return Err(GraphError::BadTensor {
                tensor: t.id.clone(),
                reason: format!("fed {:?}, declared {:?}", value.dims(), t.dims),
            });
        }
        env.insert(t.id.clone(), value.clone());
    }
    for n in g.nodes() {
        let outs = eval_node(g, n, &env, cfg)?;
        for (id, value) in n.outputs.iter().zip(outs) {
            env.insert(id.clone(), value);
        }
    }
    Ok(env)
}

fn eval_err(n: &Node, reason: impl ToString) -> GraphError {
    GraphError::Eval { node: n.id.clone(), reason: reason.to_string() }
}

fn eval_node(g: &Graph, n: &Node, env: &BTreeMap<String, Tensor>, cfg: &NpuConfig) -> Result<Vec<Tensor>, GraphError> {
    let input = |i: usize| &env[&n.inputs[i]];
    let out_dims = |i: usize| g.dims(&n.outputs[i]).to_vec();
    Ok(match n.kind {
        NodeKind::MatMul | NodeKind::TransposedMatMul => vec![matmul(input(0), input(1), n.transposes_b(), &out_dims(0))],
        NodeKind::Add => {
            let dims = out_dims(0);
            let a = input(0).broadcast_to(&dims).ok_or_else(|| eval_err(n, "lhs does not broadcast"))?;
            let b = input(1).broadcast_to(&dims).ok_or_else(|| eval_err(n, "rhs does not broadcast"))?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            vec![Tensor::from_vec(&dims, data)]
        }
        NodeKind::SoftMax => {
            let x = input(0);
            vec![softmax(x, n.axis(x.rank())?)]
        }
        NodeKind::Transpose => {
            let x = input(0);
            vec![x.permute(&n.perm(x.rank())?)]
        }
        NodeKind::Pad => {
            let x = input(0);
            let value = n.attrs.get("value").and_then(serde_json::Value::as_f64).unwrap_or(0.0);
            let src = x.dims().to_vec();
            vec![Tensor::from_fn(&out_dims(0), |i| if i.iter().zip(&src).all(|(a, b)| a < b) { x.get(i) } else { value })]
        }
        NodeKind::Opaque => {
            if n.inputs.len() == 1 && n.outputs.len() == 1 && input(0).dims() == out_dims(0).as_slice() {
                vec![input(0).clone()]
            } else {
                return Err(eval_err(n, "opaque node is only evaluable as a same-shape identity"));
            }
        }
        NodeKind::FoldedAttention => {
            let attrs = folded_attrs(n)?;
            let mut outs = Vec::with_capacity(attrs.bindings.len());
            for b in &attrs.bindings {
                outs.push(eval_binding(g, n, b, &attrs.plan, attrs.k_needs_transpose, attrs.level, env, cfg)?);
            }
            outs
        }
    })
}

fn matmul(a: &Tensor, b: &Tensor, transpose_b: bool, out_dims: &[usize]) -> Tensor {
    let (m, k) = a.matrix_dims();
    let (br, bc) = b.matrix_dims();
    let n = if transpose_b { br } else { bc };
    let (ba, bb) = (a.batch(), b.batch());
    let group = ba / bb;
    let mut out = Tensor::zeros(out_dims);
    for i in 0..ba {
        let x = a.matrix(i);
        let y = b.matrix(i / group);
        let z = out.matrix_mut(i);
        for r in 0..m {
            for c in 0..n {
                let mut dot = 0.0;
                for t in 0..k {
                    dot += x[r * k + t] * if transpose_b { y[c * bc + t] } else { y[t * bc + c] };
                }
                z[r * n + c] = dot;
            }
        }
    }
    out
}

fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let rank = x.rank();
    let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
    perm.push(axis);
    let mut moved = x.permute(&perm);
    let len = x.dims()[axis];
    for row in moved.data_mut().chunks_mut(len) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / s;
        }
    }
    let mut inverse = vec![0; rank];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    moved.permute(&inverse)
}

/// Run one binding of a folded node on its own rebound plan.
#[allow(clippy::too_many_arguments)]
fn eval_binding(
    g: &Graph,
    n: &Node,
    b: &FoldedBinding,
    plan: &FoldingPlan,
    k_needs_transpose: bool,
    level: FoldingLevel,
    env: &BTreeMap<String, Tensor>,
    cfg: &NpuConfig,
) -> Result<Tensor, GraphError> {
    let s = plan.shape;
    let as3 = |t: &Tensor, rows: usize, cols: usize| -> Result<Tensor, GraphError> {
        let (r, c) = t.matrix_dims();
        if (r, c) != (rows, cols) {
            return Err(eval_err(n, format!("operand {:?} is not (.., {rows}, {cols})", t.dims())));
        }
        Ok(t.clone().reshape(&[t.batch(), rows, cols]))
    };
    let q = as3(&env[&b.q], s.lq, s.d)?;
    let k_raw = &env[&b.k];
    let k = if k_needs_transpose {
        as3(k_raw, s.lk, s.d)?
    } else {
        as3(k_raw, s.d, s.lk)?.permute(&[0, 2, 1])
    };
    let v = match &b.v {
        Some(v) => as3(&env[v], s.lk, s.dv)?,
        // level 2 never reads V; a zero stand-in keeps the operand set uniform
        None => Tensor::zeros(&[k.dims()[0], s.lk, s.dv]),
    };
    let heads = q.dims()[0];
    let mut score_dims = env[&b.q].dims().to_vec();
    let rank = score_dims.len();
    score_dims[rank - 2..].copy_from_slice(&[s.lq, s.lk]);
    let extra = |id: &Option<String>| -> Result<Option<Tensor>, GraphError> {
        let Some(id) = id else { return Ok(None) };
        let t = &env[id];
        let expanded = if t.batch() == 1 {
            let (r, c) = t.matrix_dims();
            Tensor::from_vec(&[1, r, c], t.data().to_vec()).broadcast_to(&[1, s.lq, s.lk])
        } else {
            t.broadcast_to(&score_dims).map(|x| x.reshape(&[heads, s.lq, s.lk]))
        };
        expanded.map(Some).ok_or_else(|| eval_err(n, format!("`{id}` {:?} does not broadcast to {score_dims:?}", t.dims())))
    };
    let inputs = AttentionInputs::new(q, k, v, extra(&b.bias)?, extra(&b.mask)?).map_err(|e| eval_err(n, e))?;
    let got = inputs.shape().map_err(|e| eval_err(n, e))?;
    let sharing = |x: Option<Sharing>| x.map(|_| Sharing::PerHead);
    let shape = AttentionShape {
        heads: got.heads,
        kv_heads: got.kv_heads,
        bias: got.bias.or(sharing(s.bias)),
        mask: got.mask.or(sharing(s.mask)),
        ..s
    };
    let bound = plan.rebind(shape, cfg).map_err(|e| eval_err(n, e))?;
    let out_dims = g.dims(&b.out).to_vec();
    let out = match level {
        FoldingLevel::Full => {
            let (z, _) = execute_folded_with(&bound, &inputs, cfg, ExecMode::Sequential).map_err(|e| eval_err(n, e))?;
            crop_output(&z, &bound).map_err(|e| eval_err(n, e))?
        }
        _ => {
            let sm = execute_softmax_stage(&bound, &inputs, ExecMode::Sequential).map_err(|e| eval_err(n, e))?;
            Tensor::from_fn(&[shape.heads, s.lq, s.lk], |i| sm.get(i))
        }
    };
    Ok(out.reshape(&out_dims))
}
