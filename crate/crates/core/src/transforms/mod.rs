//! Data-layout transforms that keep the attention block folded: block-level
//! DMA transpose with an in-kernel intra-block transpose, and DMA or
//! producer-side padding with a matching depad crop.

mod padding;
mod transpose;

pub use padding::{
    apply_depad, apply_pad, device_key_mask_fill, granules_for, plan_padding,
    plan_padding_with_granules, PadFill, PadMechanism, PadPlan, SIM_KEY_MASK,
};
pub use transpose::{
    block_transpose, dense_transpose, intra_block_transpose, plan_transpose,
    transpose_via_blocks, ConsumerKernel, TransposeMode, TransposePlan, TransposeStage,
};
