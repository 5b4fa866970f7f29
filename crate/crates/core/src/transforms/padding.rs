use serde::{Deserialize, Serialize};

use crate::error::TransformError;
use crate::graph::{TensorDesc, TensorRole};
use crate::hw::{round_up, KernelGranularity, NpuConfig};
use crate::tensor::Tensor;

/// Additive mask value the simulator writes into padded key columns.
pub const SIM_KEY_MASK: f64 = -1e9;

/// Mask value a device of the given element width would use for padded keys:
/// large enough to zero the softmax weight, small enough to stay finite.
pub fn device_key_mask_fill(elem_bytes: u32) -> f64 {
    match elem_bytes {
        1 => -128.0,
        2 => -6.0e4,
        _ => SIM_KEY_MASK,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMechanism {
    /// The L2 read DMA inserts the padding on the fly.
    DmaPad,
    /// The producing node writes its output at the padded extents.
    ProducerPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadFill {
    Zero,
    /// Padded columns of the last axis get `value`, padded rows get 0.
    KeyMask { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PadPlan {
    pub tensor: String,
    /// Trailing pad per dim, in elements.
    pub pads: Vec<usize>,
    pub mechanism: PadMechanism,
    pub logical_dims: Vec<usize>,
    pub padded_dims: Vec<usize>,
    pub fill: PadFill,
    /// Mask value at the modeled element width (simulation always uses
    /// [`SIM_KEY_MASK`]).
    pub device_fill: f64,
}

impl PadPlan {
    /// Number of dims that actually receive padding.
    pub fn padded_dim_count(&self) -> usize {
        self.pads.iter().filter(|&&p| p > 0).count()
    }

    pub fn is_noop(&self) -> bool {
        self.padded_dim_count() == 0
    }

    /// Crop spec: the logical extents the block output is cut back to.
    pub fn depad(&self) -> &[usize] {
        &self.logical_dims
    }
}

/// Per-dim granules for a tensor by role. Leading (batch/head) dims never pad;
/// tensors without an attention role pad every dim to the transpose block.
pub fn granules_for(tensor: &TensorDesc, gran: &KernelGranularity) -> Vec<usize> {
    let rank = tensor.dims.len();
    let trailing = match tensor.role {
        TensorRole::Q => Some((gran.q_rows(), gran.head_dim())),
        TensorRole::K => Some((gran.kv_rows(), gran.head_dim())),
        TensorRole::V => Some((gran.kv_rows(), gran.value_dim())),
        TensorRole::Bias | TensorRole::Mask => Some((gran.q_rows(), gran.kv_rows())),
        TensorRole::Output => Some((gran.q_rows(), gran.value_dim())),
        TensorRole::Intermediate | TensorRole::Other => None,
    };
    match trailing {
        Some((row, col)) if rank >= 2 => {
            let mut g = vec![1; rank - 2];
            g.extend([row, col]);
            g
        }
        Some((_, col)) => vec![col; rank],
        None => vec![gran.block; rank],
    }
}

/// Pad `tensor` to its role's kernel granules.
pub fn plan_padding(
    tensor: &TensorDesc,
    gran: &KernelGranularity,
    cfg: &NpuConfig,
    producer_can_pad: bool,
) -> Result<PadPlan, TransformError> {
    plan_padding_with_granules(tensor, &granules_for(tensor, gran), cfg, producer_can_pad)
}

pub fn plan_padding_with_granules(
    tensor: &TensorDesc,
    granules: &[usize],
    cfg: &NpuConfig,
    producer_can_pad: bool,
) -> Result<PadPlan, TransformError> {
    if granules.len() != tensor.dims.len() {
        return Err(TransformError::Dimension(format!(
            "{} granules for rank-{} tensor `{}`",
            granules.len(),
            tensor.dims.len(),
            tensor.id
        )));
    }
    if let Some(d) = tensor.dims.iter().find(|&&d| d == 0) {
        return Err(TransformError::Dimension(format!("tensor `{}` has extent {d}", tensor.id)));
    }
    let padded_dims = tensor
        .dims
        .iter()
        .zip(granules)
        .map(|(&d, &g)| round_up(d, g))
        .collect::<Result<Vec<_>, _>>()?;
    let pads: Vec<usize> = padded_dims.iter().zip(&tensor.dims).map(|(p, d)| p - d).collect();
    let ragged = pads.iter().filter(|&&p| p > 0).count();

    let mechanism = if ragged <= cfg.dma_pad_dims {
        PadMechanism::DmaPad
    } else if producer_can_pad {
        PadMechanism::ProducerPad
    } else {
        return Err(TransformError::Unpaddable {
            tensor: tensor.id.clone(),
            ragged,
            limit: cfg.dma_pad_dims,
        });
    };
    let fill = if tensor.role == TensorRole::Mask {
        PadFill::KeyMask { value: SIM_KEY_MASK }
    } else {
        PadFill::Zero
    };
    Ok(PadPlan {
        tensor: tensor.id.clone(),
        pads,
        mechanism,
        logical_dims: tensor.dims.clone(),
        padded_dims,
        fill,
        device_fill: device_key_mask_fill(cfg.elem_bytes),
    })
}

pub fn apply_pad(data: &Tensor, plan: &PadPlan) -> Result<Tensor, TransformError> {
    if data.dims() != plan.logical_dims.as_slice() {
        return Err(TransformError::Dimension(format!(
            "apply_pad: data {:?} does not match logical dims {:?}",
            data.dims(),
            plan.logical_dims
        )));
    }
    let logical = &plan.logical_dims;
    let last = logical.len().saturating_sub(1);
    Ok(Tensor::from_fn(&plan.padded_dims, |idx| {
        if idx.iter().zip(logical).all(|(i, d)| i < d) {
            return data.get(idx);
        }
        match plan.fill {
            PadFill::Zero => 0.0,
            PadFill::KeyMask { value } => {
                if idx[last] >= logical[last] {
                    value
                } else {
                    0.0
                }
            }
        }
    }))
}

pub fn apply_depad(data: &Tensor, plan: &PadPlan) -> Result<Tensor, TransformError> {
    if data.dims() != plan.padded_dims.as_slice() {
        return Err(TransformError::Dimension(format!(
            "apply_depad: data {:?} does not match padded dims {:?}",
            data.dims(),
            plan.padded_dims
        )));
    }
    Ok(Tensor::from_fn(&plan.logical_dims, |idx| data.get(idx)))
}
