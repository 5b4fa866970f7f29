use super::inputs::{head_slice, AttentionInputs};
use crate::error::SimError;
use crate::tensor::Tensor;
use crate::transforms::SIM_KEY_MASK;

/// Dense `softmax(Q K^T + B + M) V`, row-wise softmax, double precision.
///
/// Normalization is applied after the value accumulation, which is the
/// order a single-tile folded execution uses as well.
pub fn reference_attention(inputs: &AttentionInputs) -> Result<Tensor, SimError> {
    let shape = inputs.shape()?;
    let (lq, lk, d, dv) = (shape.lq, shape.lk, shape.d, shape.dv);
    let group = shape.group();
    let mut out = Tensor::zeros(&[shape.heads, lq, dv]);
    let mut scores = vec![0.0; lk];
    let mut acc = vec![0.0; dv];
    for h in 0..shape.heads {
        let q = inputs.q.matrix(h);
        let k = inputs.k.matrix(h / group);
        let v = inputs.v.matrix(h / group);
        let bias = head_slice(&inputs.bias, h);
        let mask = head_slice(&inputs.mask, h);
        for r in 0..lq {
            for (c, score) in scores.iter_mut().enumerate() {
                let mut dot = 0.0;
                for t in 0..d {
                    dot += q[r * d + t] * k[c * d + t];
                }
                if let Some(b) = bias {
                    dot += b[r * lk + c];
                }
                if let Some(m) = mask {
                    dot += m[r * lk + c];
                }
                *score = dot;
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            acc.fill(0.0);
            for (c, &s) in scores.iter().enumerate() {
                let e = (s - m).exp();
                sum += e;
                for t in 0..dv {
                    acc[t] += e * v[c * dv + t];
                }
            }
            let row = &mut out.matrix_mut(h)[r * dv..(r + 1) * dv];
            for t in 0..dv {
                row[t] = acc[t] / sum;
            }
        }
    }
    Ok(out)
}

/// Largest softmax mass any query row puts on the padded key columns when
/// keys are padded from `inputs`' Lk to `padded_lk` with the simulator's key
/// mask.
pub fn padded_key_mass(inputs: &AttentionInputs, padded_lk: usize, padded_d: usize) -> Result<f64, SimError> {
    let shape = inputs.shape()?;
    if padded_lk < shape.lk || padded_d < shape.d {
        return Err(SimError::ShapeMismatch("padded extents smaller than logical".into()));
    }
    let group = shape.group();
    let mut worst: f64 = 0.0;
    for h in 0..shape.heads {
        let q = inputs.q.matrix(h);
        let k = inputs.k.matrix(h / group);
        let (bias, mask) = (head_slice(&inputs.bias, h), head_slice(&inputs.mask, h));
        for r in 0..shape.lq {
            let scores: Vec<f64> = (0..padded_lk)
                .map(|c| {
                    if c >= shape.lk {
                        // zero-padded K row dotted with Q, plus the key mask
                        return SIM_KEY_MASK;
                    }
                    let mut dot: f64 = (0..shape.d).map(|t| q[r * shape.d + t] * k[c * shape.d + t]).sum();
                    dot += bias.map_or(0.0, |b| b[r * shape.lk + c]);
                    dot += mask.map_or(0.0, |m| m[r * shape.lk + c]);
                    dot
                })
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let total: f64 = e.iter().sum();
            let padded: f64 = e[shape.lk..].iter().sum();
            worst = worst.max(padded / total);
        }
    }
    Ok(worst)
}
