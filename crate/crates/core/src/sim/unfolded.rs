//! Operator-by-operator execution with every intermediate in DRAM.

use super::inputs::{head_slice, AttentionInputs};
use super::schedule::{dram_read, dram_write, Access, FirstTouch, Operand, Schedule, Step, StepKind, TileCoord};
use crate::error::SimError;
use crate::hw::NpuConfig;
use crate::parallel::{self, ExecMode};
use crate::tensor::Tensor;
use crate::tiler::{FoldingPlan, Sharing};

/// Run the chain as standalone passes on logical operands. Only the shapes
/// of `plan` are used; the result has logical extents `[heads, Lq, dv]`.
pub fn execute_unfolded(plan: &FoldingPlan, inputs: &AttentionInputs, cfg: &NpuConfig) -> Result<(Tensor, Schedule), SimError> {
    execute_unfolded_with(plan, inputs, cfg, ExecMode::default())
}

pub fn execute_unfolded_with(
    plan: &FoldingPlan,
    inputs: &AttentionInputs,
    cfg: &NpuConfig,
    mode: ExecMode,
) -> Result<(Tensor, Schedule), SimError> {
    let got = inputs.shape()?;
    let l = plan.shape;
    if (got.heads, got.kv_heads, got.lq, got.lk, got.d, got.dv) != (l.heads, l.kv_heads, l.lq, l.lk, l.d, l.dv)
        || got.bias.is_some() != l.bias.is_some()
        || got.mask.is_some() != l.mask.is_some()
    {
        return Err(SimError::ShapeMismatch("inputs do not match the block's logical shape".into()));
    }
    let (lq, lk, d, dv) = (l.lq, l.lk, l.d, l.dv);
    let group = l.group();

    // Pass 0 (optional): standalone transpose of K.
    let kt: Option<Vec<Tensor>> = l.k_transpose.then(|| {
        parallel::map_range(mode, l.kv_heads, |i| Tensor::from_vec(&[lk, d], inputs.k.matrix(i).to_vec()).permute(&[1, 0]))
    });

    let heads = parallel::map_range(mode, l.heads, |h| {
        let q = inputs.q.matrix(h);
        let kvh = h / group;

        // QK^T
        let mut a = vec![0.0; lq * lk];
        for r in 0..lq {
            for c in 0..lk {
                let mut dot = 0.0;
                for t in 0..d {
                    let kv = match &kt {
                        Some(kt) => kt[kvh].data()[t * lk + c],
                        None => inputs.k.matrix(kvh)[c * d + t],
                    };
                    dot += q[r * d + t] * kv;
                }
                a[r * lk + c] = dot;
            }
        }
        // Add bias, then mask, each as its own elementwise pass.
        for extra_op in [head_slice(&inputs.bias, h), head_slice(&inputs.mask, h)].into_iter().flatten() {
            a = a.iter().zip(extra_op).map(|(x, y)| x + y).collect();
        }
        // SoftMax
        let mut sm = vec![0.0; lq * lk];
        for r in 0..lq {
            let row = &a[r * lk..(r + 1) * lk];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            for c in 0..lk {
                sm[r * lk + c] = (row[c] - m).exp() / s;
            }
        }
        // SM * V
        let v = inputs.v.matrix(kvh);
        let mut z = vec![0.0; lq * dv];
        for r in 0..lq {
            for c in 0..lk {
                let w = sm[r * lk + c];
                for t in 0..dv {
                    z[r * dv + t] += w * v[c * dv + t];
                }
            }
        }
        z
    });
    let mut z = Tensor::zeros(&[l.heads, lq, dv]);
    for (h, m) in heads.into_iter().enumerate() {
        z.matrix_mut(h).copy_from_slice(&m);
    }
    Ok((z, build_unfolded_schedule(plan, cfg)))
}

/// One step per (pass, head). DRAM bytes are logical; compute on padded extents.
pub fn build_unfolded_schedule(plan: &FoldingPlan, cfg: &NpuConfig) -> Schedule {
    let (l, p) = (plan.shape, plan.padded);
    let e = u64::from(cfg.elem_bytes);
    let group = l.group();
    let score = (l.lq * l.lk) as u64 * e;
    let padded_score = (p.lq * p.lk) as u64;
    let extra_head = |s: Option<Sharing>, h: usize| if s == Some(Sharing::Shared) { 0 } else { h };
    let core = |h: usize| (0, h % cfg.cols.max(1));
    let mut steps = Vec::new();
    let mut pass = 0;

    let push = |steps: &mut Vec<Step>, pass: usize, kind: StepKind, h: usize, accesses: Vec<Access>, ops: u64| {
        steps.push(Step { core: core(h), kind, pass, tile: TileCoord { head: h, q_tile: None, k_tile: None }, accesses, ops });
    };

    let k_operand = if l.k_transpose {
        for kvh in 0..l.kv_heads {
            let bytes = (l.lk * l.d) as u64 * e;
            push(&mut steps, pass, StepKind::TransposeK, kvh, vec![dram_read(Operand::K, bytes), dram_write(Operand::KT, bytes)], 0);
        }
        pass += 1;
        Operand::KT
    } else {
        Operand::K
    };

    let mut touch = FirstTouch::new();
    for h in 0..l.heads {
        let kv = (l.lk * l.d) as u64 * e;
        let accesses = vec![
            dram_read(Operand::Q, (l.lq * l.d) as u64 * e),
            touch.read(k_operand, (h / group, 0, 0), kv, (p.lk * p.d) as u64 * e),
            dram_write(Operand::Scores, score),
        ];
        push(&mut steps, pass, StepKind::QkMatMul, h, accesses, 2 * padded_score * p.d as u64);
    }
    pass += 1;

    let mut current = Operand::Scores;
    let adds = [
        (l.bias, Operand::Bias, Operand::BiasedScores, StepKind::AddBias),
        (l.mask, Operand::Mask, Operand::MaskedScores, StepKind::AddMask),
    ];
    for (sharing, operand, result, kind) in adds {
        if sharing.is_none() {
            continue;
        }
        let mut touch = FirstTouch::new();
        for h in 0..l.heads {
            let accesses = vec![
                dram_read(current, score),
                touch.read(operand, (extra_head(sharing, h), 0, 0), score, padded_score * e),
                dram_write(result, score),
            ];
            push(&mut steps, pass, kind, h, accesses, padded_score);
        }
        current = result;
        pass += 1;
    }

    for h in 0..l.heads {
        let accesses = vec![dram_read(current, score), dram_write(Operand::SmOut, score)];
        push(&mut steps, pass, StepKind::Softmax, h, accesses, 5 * padded_score);
    }
    pass += 1;

    let mut touch = FirstTouch::new();
    for h in 0..l.heads {
        let accesses = vec![
            dram_read(Operand::SmOut, score),
            touch.read(Operand::V, (h / group, 0, 0), (l.lk * l.dv) as u64 * e, (p.lk * p.dv) as u64 * e),
            dram_write(Operand::Out, (l.lq * l.dv) as u64 * e),
        ];
        push(&mut steps, pass, StepKind::SvMatMul, h, accesses, 2 * padded_score * p.dv as u64);
    }

    Schedule { plan: FoldingPlan::unfolded(l, p), steps }
}
