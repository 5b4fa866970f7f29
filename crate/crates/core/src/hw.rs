//! Parameterized NPU hardware model and kernel granularity constraints.
//!
//! Every other module consults these two value types. Both are plain data,
//! loadable from JSON and overridable field by field.

use serde::{Deserialize, Serialize};

use crate::error::HwError;

/// Grid geometry, memory capacities and transfer/compute rates of the modeled NPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NpuConfig {
    pub rows: usize,
    pub cols: usize,
    /// L1 scratchpad per core tile, bytes.
    pub l1_bytes: u64,
    /// L2 staging memory per memory tile, bytes.
    pub l2_bytes: u64,
    /// Pooled DRAM read+write bandwidth.
    pub dram_bw_bytes_per_s: f64,
    pub peak_ops_per_s: f64,
    /// Minimum traversal stride of a DMA descriptor, bytes.
    pub dma_min_stride_bytes: u32,
    /// Number of dimensions an MM2S (read) channel can pad.
    pub dma_pad_dims: usize,
    pub elem_bytes: u32,
}

impl Default for NpuConfig {
    fn default() -> Self {
        default_xdna2_config()
    }
}

/// The 4x8 XDNA2-class profile: 64 KiB L1, 512 KiB L2, ~60 GB/s DRAM, 50 TOPS.
pub fn default_xdna2_config() -> NpuConfig {
    NpuConfig {
        rows: 4,
        cols: 8,
        l1_bytes: 65_536,
        l2_bytes: 524_288,
        dram_bw_bytes_per_s: 60e9,
        peak_ops_per_s: 50e12,
        dma_min_stride_bytes: 4,
        dma_pad_dims: 3,
        elem_bytes: 2,
    }
}

impl NpuConfig {
    pub fn cores(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<(), HwError> {
        let bad = |field: &'static str, reason: &str| {
            Err(HwError::InvalidConfig { field, reason: reason.to_string() })
        };
        if self.rows == 0 {
            return bad("rows", "must be at least 1");
        }
        if self.cols == 0 {
            return bad("cols", "must be at least 1");
        }
        if self.l1_bytes == 0 {
            return bad("l1_bytes", "must be positive");
        }
        if self.l2_bytes < self.l1_bytes {
            return bad("l2_bytes", "must be at least l1_bytes");
        }
        if !(self.dram_bw_bytes_per_s > 0.0 && self.dram_bw_bytes_per_s.is_finite()) {
            return bad("dram_bw_bytes_per_s", "must be positive and finite");
        }
        if !(self.peak_ops_per_s > 0.0 && self.peak_ops_per_s.is_finite()) {
            return bad("peak_ops_per_s", "must be positive and finite");
        }
        if self.dma_min_stride_bytes == 0 {
            return bad("dma_min_stride_bytes", "must be positive");
        }
        if !matches!(self.elem_bytes, 1 | 2 | 4 | 8) {
            return bad("elem_bytes", "must be one of 1, 2, 4, 8");
        }
        Ok(())
    }
}

/// Minimum per-axis tile extents the compute kernels accept.
///
/// `stream_buffers` is the buffering factor applied to operands that are
/// streamed through L1 while another operand stays resident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelGranularity {
    pub m_min: usize,
    pub k_min: usize,
    pub n_min: usize,
    pub sm_min: usize,
    /// Edge of the square blocks moved by the block-transpose DMA.
    pub block: usize,
    pub stream_buffers: u64,
}

impl Default for KernelGranularity {
    fn default() -> Self {
        Self { m_min: 8, k_min: 8, n_min: 8, sm_min: 8, block: 8, stream_buffers: 2 }
    }
}

impl KernelGranularity {
    pub fn validate(&self, cfg: &NpuConfig) -> Result<(), HwError> {
        for (field, v) in [
            ("m_min", self.m_min),
            ("k_min", self.k_min),
            ("n_min", self.n_min),
            ("sm_min", self.sm_min),
            ("block", self.block),
        ] {
            if v == 0 {
                return Err(HwError::InvalidGranularity { field, value: v });
            }
        }
        if self.stream_buffers == 0 {
            return Err(HwError::InvalidGranularity { field: "stream_buffers", value: 0 });
        }
        if (self.block as u64) * u64::from(cfg.elem_bytes) < u64::from(cfg.dma_min_stride_bytes) {
            return Err(HwError::InvalidConfig {
                field: "block",
                reason: format!(
                    "block row of {} x {}B is below the {}B DMA stride",
                    self.block, cfg.elem_bytes, cfg.dma_min_stride_bytes
                ),
            });
        }
        Ok(())
    }

    /// Granule for query rows (MatMul M).
    pub fn q_rows(&self) -> usize {
        self.m_min
    }

    /// Granule for key/value rows: the score tile's column count, the
    /// softmax vector length, the SM*V contraction and the transpose block.
    pub fn kv_rows(&self) -> usize {
        lcm(lcm(self.n_min, self.k_min), lcm(self.sm_min, self.block))
    }

    /// Granule for the QK^T contraction (head dim of Q and K).
    pub fn head_dim(&self) -> usize {
        lcm(self.k_min, self.block)
    }

    /// Granule for the value head dim (SM*V output columns).
    pub fn value_dim(&self) -> usize {
        self.n_min
    }
}

/// Smallest multiple of `granule` that is `>= dim`.
pub fn round_up(dim: usize, granule: usize) -> Result<usize, HwError> {
    if granule == 0 {
        return Err(HwError::InvalidGranularity { field: "granule", value: 0 });
    }
    Ok(dim.div_ceil(granule) * granule)
}

pub(crate) fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub(crate) fn lcm(a: usize, b: usize) -> usize {
    if a == 0 || b == 0 {
        return 0;
    }
    a / gcd(a, b) * b
}

/// Hardware profile as stored in a config file: NPU plus kernel granularity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HwProfile {
    pub npu: NpuConfig,
    pub granularity: KernelGranularity,
}

impl HwProfile {
    pub fn from_json(text: &str) -> Result<Self, HwError> {
        let profile: HwProfile =
            serde_json::from_str(text).map_err(|e| HwError::Parse(e.to_string()))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), HwError> {
        self.npu.validate()?;
        self.granularity.validate(&self.npu)
    }

    /// Apply one `key=value` override. Keys are bare field names or
    /// `npu.<field>` / `granularity.<field>` (alias `gran.<field>`).
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), HwError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| HwError::BadOverride(format!("`{assignment}` is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        let field = key
            .strip_prefix("npu.")
            .or_else(|| key.strip_prefix("granularity."))
            .or_else(|| key.strip_prefix("gran."))
            .unwrap_or(key);

        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HwError> {
            v.parse()
                .map_err(|_| HwError::BadOverride(format!("`{key}`: cannot parse `{v}`")))
        }

        let npu = &mut self.npu;
        let gran = &mut self.granularity;
        match field {
            "rows" => npu.rows = num(key, value)?,
            "cols" => npu.cols = num(key, value)?,
            "l1_bytes" => npu.l1_bytes = num(key, value)?,
            "l2_bytes" => npu.l2_bytes = num(key, value)?,
            "dram_bw_bytes_per_s" => npu.dram_bw_bytes_per_s = num(key, value)?,
            "peak_ops_per_s" => npu.peak_ops_per_s = num(key, value)?,
            "dma_min_stride_bytes" => npu.dma_min_stride_bytes = num(key, value)?,
            "dma_pad_dims" => npu.dma_pad_dims = num(key, value)?,
            "elem_bytes" => npu.elem_bytes = num(key, value)?,
            "m_min" => gran.m_min = num(key, value)?,
            "k_min" => gran.k_min = num(key, value)?,
            "n_min" => gran.n_min = num(key, value)?,
            "sm_min" => gran.sm_min = num(key, value)?,
            "block" => gran.block = num(key, value)?,
            "stream_buffers" => gran.stream_buffers = num(key, value)?,
            _ => return Err(HwError::BadOverride(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }
}
