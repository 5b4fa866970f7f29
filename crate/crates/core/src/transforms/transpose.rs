use serde::{Deserialize, Serialize};

use crate::error::TransformError;
use crate::graph::TensorDesc;
use crate::hw::{KernelGranularity, NpuConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransposeStage {
    /// Block permutation by the L2 read DMA.
    L2Dma,
    /// A standalone transpose kernel on the cores.
    StandaloneKernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransposeMode {
    /// DMA permutes block x block tiles; the consumer transposes inside each tile.
    Block,
    /// DMA moves single elements (legal only when an element spans the minimum stride).
    Element,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConsumerKernel {
    /// MatMul that shuffles each incoming block at register level before multiplying.
    TransposedMatMul,
    MatMul,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransposePlan {
    pub tensor: String,
    pub block: usize,
    pub mode: TransposeMode,
    pub stage: TransposeStage,
    pub consumer_kernel: ConsumerKernel,
    pub needs_separate_kernel: bool,
    /// L1 bytes reserved for transpose staging; zero on the folded path.
    pub l1_staging_bytes: u64,
}

/// Plan the transpose of `tensor`'s trailing two axes.
pub fn plan_transpose(
    tensor: &TensorDesc,
    cfg: &NpuConfig,
    gran: &KernelGranularity,
    folded: bool,
) -> Result<TransposePlan, TransformError> {
    let rank = tensor.dims.len();
    if rank < 2 {
        return Err(TransformError::Dimension(format!(
            "tensor `{}` has rank {rank}; transpose needs rank >= 2",
            tensor.id
        )));
    }
    let block = gran.block;
    if block == 0 || tensor.dims[rank - 2..].iter().any(|d| d % block != 0) {
        return Err(TransformError::MustPadFirst {
            tensor: tensor.id.clone(),
            dims: tensor.dims.clone(),
            block,
        });
    }
    if (block as u64) * u64::from(cfg.elem_bytes) < u64::from(cfg.dma_min_stride_bytes) {
        return Err(TransformError::StrideViolation {
            block,
            elem_bytes: cfg.elem_bytes,
            stride: cfg.dma_min_stride_bytes,
        });
    }
    let element_legal = cfg.elem_bytes >= cfg.dma_min_stride_bytes;

    Ok(if folded {
        TransposePlan {
            tensor: tensor.id.clone(),
            block,
            mode: TransposeMode::Block,
            stage: TransposeStage::L2Dma,
            consumer_kernel: ConsumerKernel::TransposedMatMul,
            needs_separate_kernel: false,
            l1_staging_bytes: 0,
        }
    } else {
        TransposePlan {
            tensor: tensor.id.clone(),
            block,
            mode: if element_legal { TransposeMode::Element } else { TransposeMode::Block },
            stage: TransposeStage::StandaloneKernel,
            consumer_kernel: ConsumerKernel::MatMul,
            needs_separate_kernel: true,
            l1_staging_bytes: (block * block) as u64 * u64::from(cfg.elem_bytes),
        }
    })
}

fn check_2d(data: &Tensor, block: usize, what: &str) -> Result<(usize, usize), TransformError> {
    if data.rank() != 2 {
        return Err(TransformError::Dimension(format!("{what} expects a 2-D array, got {:?}", data.dims())));
    }
    let (r, c) = (data.dims()[0], data.dims()[1]);
    if block == 0 || r % block != 0 || c % block != 0 {
        return Err(TransformError::Dimension(format!(
            "{what}: {r}x{c} is not a multiple of block {block}"
        )));
    }
    Ok((r, c))
}

/// Permute `block x block` tiles of an `R x C` array into a `C x R` array.
///
/// Output tile `(i, j)` holds input tile `(j, i)` with its internal layout
/// unchanged; only whole blocks move.
pub fn block_transpose(data: &Tensor, block: usize) -> Result<Tensor, TransformError> {
    let (r, c) = check_2d(data, block, "block_transpose")?;
    let src = data.data();
    let mut out = vec![0.0; r * c];
    for bi in 0..c / block {
        for bj in 0..r / block {
            // output tile (bi, bj) <- input tile (bj, bi)
            for y in 0..block {
                let src_row = (bj * block + y) * c + bi * block;
                let dst_row = (bi * block + y) * r + bj * block;
                out[dst_row..dst_row + block].copy_from_slice(&src[src_row..src_row + block]);
            }
        }
    }
    Ok(Tensor::from_vec(&[c, r], out))
}

/// True transpose of one square tile.
pub fn intra_block_transpose(tile: &Tensor, block: usize) -> Result<Tensor, TransformError> {
    if tile.dims() != [block, block] {
        return Err(TransformError::Dimension(format!(
            "intra_block_transpose expects {block}x{block}, got {:?}",
            tile.dims()
        )));
    }
    let t = tile.data();
    Ok(Tensor::from_fn(&[block, block], |i| t[i[1] * block + i[0]]))
}

/// Block transpose followed by a per-tile intra-block transpose; the full
/// transposition as a folded Transposed-MatMul consumer sees it.
pub fn transpose_via_blocks(data: &Tensor, block: usize) -> Result<Tensor, TransformError> {
    let mut permuted = block_transpose(data, block)?;
    let (rows, cols) = (permuted.dims()[0], permuted.dims()[1]);
    let buf = permuted.data_mut();
    let mut tile = Tensor::zeros(&[block, block]);
    for bi in 0..rows / block {
        for bj in 0..cols / block {
            for y in 0..block {
                let row = (bi * block + y) * cols + bj * block;
                tile.data_mut()[y * block..(y + 1) * block].copy_from_slice(&buf[row..row + block]);
            }
            let t = intra_block_transpose(&tile, block)?;
            for y in 0..block {
                let row = (bi * block + y) * cols + bj * block;
                buf[row..row + block].copy_from_slice(&t.data()[y * block..(y + 1) * block]);
            }
        }
    }
    Ok(permuted)
}

/// Element-wise transpose of a 2-D array.
pub fn dense_transpose(data: &Tensor) -> Result<Tensor, TransformError> {
    if data.rank() != 2 {
        return Err(TransformError::Dimension(format!("expected 2-D, got {:?}", data.dims())));
    }
    Ok(data.permute(&[1, 0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TensorRole;
    use crate::hw::default_xdna2_config;

    fn k_desc(dims: &[usize]) -> TensorDesc {
        TensorDesc { id: "k".into(), dims: dims.to_vec(), role: TensorRole::K }
    }

    #[test]
    fn half_precision_needs_block_transpose() {
        let cfg = default_xdna2_config();
        let plan = plan_transpose(&k_desc(&[64, 64]), &cfg, &KernelGranularity::default(), true).unwrap();
        assert_eq!(plan.block, 8);
        assert_eq!(plan.mode, TransposeMode::Block);
        assert_eq!(plan.consumer_kernel, ConsumerKernel::TransposedMatMul);
        assert!(!plan.needs_separate_kernel);
        assert_eq!(plan.l1_staging_bytes, 0);
    }

    #[test]
    fn word_elements_still_use_blocks_when_folded() {
        let cfg = NpuConfig { elem_bytes: 4, ..default_xdna2_config() };
        let gran = KernelGranularity::default();
        let folded = plan_transpose(&k_desc(&[16, 8]), &cfg, &gran, true).unwrap();
        assert_eq!(folded.mode, TransposeMode::Block);
        let unfolded = plan_transpose(&k_desc(&[16, 8]), &cfg, &gran, false).unwrap();
        assert_eq!(unfolded.mode, TransposeMode::Element);
    }

    #[test]
    fn unfolded_consumer_needs_its_own_kernel() {
        let cfg = default_xdna2_config();
        let plan = plan_transpose(&k_desc(&[2, 64, 64]), &cfg, &KernelGranularity::default(), false).unwrap();
        assert!(plan.needs_separate_kernel);
        assert_eq!(plan.stage, TransposeStage::StandaloneKernel);
        assert!(plan.l1_staging_bytes > 0);
    }

    #[test]
    fn ragged_tensor_must_be_padded_first() {
        let cfg = default_xdna2_config();
        let err = plan_transpose(&k_desc(&[197, 64]), &cfg, &KernelGranularity::default(), true).unwrap_err();
        assert!(matches!(err, TransformError::MustPadFirst { .. }));
    }

    #[test]
    fn single_block_is_unchanged() {
        let x = Tensor::from_fn(&[8, 8], |i| (i[0] * 8 + i[1]) as f64);
        assert_eq!(block_transpose(&x, 8).unwrap(), x);
    }

    #[test]
    fn blocks_move_whole() {
        let x = Tensor::from_fn(&[16, 8], |i| (i[0] * 8 + i[1]) as f64);
        let y = block_transpose(&x, 8).unwrap();
        assert_eq!(y.dims(), &[8, 16]);
        // output tile (0,1) is input tile (1,0), untransposed
        assert_eq!(y.get(&[0, 8]), x.get(&[8, 0]));
        assert_eq!(y.get(&[2, 9]), x.get(&[10, 1]));
        assert_eq!(transpose_via_blocks(&x, 8).unwrap(), dense_transpose(&x).unwrap());
    }

    #[test]
    fn block_transpose_twice_restores() {
        let x = Tensor::from_fn(&[24, 16], |i| (i[0] * 100 + i[1]) as f64);
        let y = block_transpose(&block_transpose(&x, 8).unwrap(), 8).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn intra_block_index_formula() {
        let b = 8;
        let t = Tensor::from_fn(&[b, b], |i| (i[0] * b + i[1]) as f64);
        let o = intra_block_transpose(&t, b).unwrap();
        for i in 0..b {
            for j in 0..b {
                assert_eq!(o.get(&[i, j]), (j * b + i) as f64);
            }
        }
        let eye = Tensor::from_fn(&[b, b], |i| f64::from(u8::from(i[0] == i[1])));
        assert_eq!(intra_block_transpose(&eye, b).unwrap(), eye);
        assert!(intra_block_transpose(&Tensor::zeros(&[8, 4]), 8).is_err());
        assert!(block_transpose(&Tensor::zeros(&[12, 8]), 8).is_err());
    }
}
