//! L1 tiling search for a folded attention block.
//!
//! Candidates are enumerated from the granule-aligned divisors of the padded
//! query and key extents, ordered by query tile size (largest first), and the
//! first candidate that fits L1 wins. Level 3 is tried before level 2; when
//! neither fits the block stays unfolded.

use serde::{Deserialize, Serialize};

use crate::error::TilerError;
use crate::hw::{round_up, KernelGranularity, NpuConfig};
use crate::transforms::{PadPlan, TransposePlan};

/// How an optional additive operand (bias or mask) is laid out across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    /// One (Lq, Lk) slice per query head.
    PerHead,
    /// A single (Lq, Lk) slice broadcast to every head.
    Shared,
}

/// Per-head extents of an attention block plus head structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttentionShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
    pub bias: Option<Sharing>,
    pub mask: Option<Sharing>,
    /// K arrives as (Lk, d) and needs a transpose before QK^T.
    #[serde(default)]
    pub k_transpose: bool,
}

impl AttentionShape {
    /// Single-head shape with d_v = d and no optional operands.
    pub fn new(heads: usize, lq: usize, lk: usize, d: usize) -> Self {
        Self {
            heads,
            kv_heads: heads,
            lq,
            lk,
            d,
            dv: d,
            bias: None,
            mask: None,
            k_transpose: false,
        }
    }

    pub fn with_dv(mut self, dv: usize) -> Self {
        self.dv = dv;
        self
    }

    pub fn with_kv_heads(mut self, kv_heads: usize) -> Self {
        self.kv_heads = kv_heads;
        self
    }

    pub fn with_bias(mut self, sharing: Sharing) -> Self {
        self.bias = Some(sharing);
        self
    }

    pub fn with_mask(mut self, sharing: Sharing) -> Self {
        self.mask = Some(sharing);
        self
    }

    pub fn with_k_transpose(mut self, yes: bool) -> Self {
        self.k_transpose = yes;
        self
    }

    pub fn has_bias(&self) -> bool {
        self.bias.is_some()
    }

    pub fn has_mask(&self) -> bool {
        self.mask.is_some()
    }

    /// Query heads sharing one kv head.
    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn validate(&self) -> Result<(), TilerError> {
        let dims = [
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("lq", self.lq),
            ("lk", self.lk),
            ("d", self.d),
            ("dv", self.dv),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(TilerError::InvalidShape(format!("{name} must be >= 1")));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(TilerError::InvalidShape(format!(
                "{} query heads not divisible by {} kv heads",
                self.heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// Round every per-head extent up to its kernel granule.
    pub fn padded(&self, gran: &KernelGranularity) -> Result<Self, TilerError> {
        Ok(Self {
            lq: round_up(self.lq, gran.q_rows())?,
            lk: round_up(self.lk, gran.kv_rows())?,
            d: round_up(self.d, gran.head_dim())?,
            dv: round_up(self.dv, gran.value_dim())?,
            ..*self
        })
    }

    pub fn check_padded(&self, gran: &KernelGranularity) -> Result<(), TilerError> {
        for (dim, value, granule) in [
            ("lq", self.lq, gran.q_rows()),
            ("lk", self.lk, gran.kv_rows()),
            ("d", self.d, gran.head_dim()),
            ("dv", self.dv, gran.value_dim()),
        ] {
            if granule == 0 || value % granule != 0 {
                return Err(TilerError::Unpadded { dim, value, granule });
            }
        }
        Ok(())
    }

    pub fn is_padded(&self, gran: &KernelGranularity) -> bool {
        self.check_padded(gran).is_ok()
    }

    /// Element counts as stored in DRAM: (q, k, v, bias, mask, out).
    pub fn element_counts(&self) -> OperandElems {
        let extra = |s: Option<Sharing>| match s {
            None => 0,
            Some(Sharing::PerHead) => self.heads * self.lq * self.lk,
            Some(Sharing::Shared) => self.lq * self.lk,
        };
        OperandElems {
            q: self.heads * self.lq * self.d,
            k: self.kv_heads * self.lk * self.d,
            v: self.kv_heads * self.lk * self.dv,
            bias: extra(self.bias),
            mask: extra(self.mask),
            out: self.heads * self.lq * self.dv,
            score: self.heads * self.lq * self.lk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperandElems {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub bias: usize,
    pub mask: usize,
    pub out: usize,
    /// One full score-shaped intermediate (A, masked A or SM_out).
    pub score: usize,
}

/// Tile extent in elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileDims {
    pub rows: usize,
    pub cols: usize,
}

impl TileDims {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn elems(&self) -> u64 {
        (self.rows * self.cols) as u64
    }
}

/// Per-operand tile shapes {S_q, S_k, S_v, S_b, S_m}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subvolumes {
    pub s_q: TileDims,
    pub s_k: TileDims,
    pub s_v: TileDims,
    pub s_b: Option<TileDims>,
    pub s_m: Option<TileDims>,
    /// K/V tiles cover the whole padded key extent and stay resident in L1.
    pub kv_resident: bool,
}

impl Subvolumes {
    pub fn q_rows(&self) -> usize {
        self.s_q.rows
    }

    pub fn k_rows(&self) -> usize {
        self.s_k.rows
    }

    pub fn score_tile(&self) -> TileDims {
        TileDims::new(self.s_q.rows, self.s_k.rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum FoldingLevel {
    /// Every chain operator runs standalone.
    Unfolded = 1,
    /// QK^T, the additive operands and SoftMax are fused; SM*V runs separately.
    SoftmaxFolded = 2,
    /// The whole chain is fused.
    Full = 3,
}

impl FoldingLevel {
    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

impl From<FoldingLevel> for u8 {
    fn from(l: FoldingLevel) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for FoldingLevel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Self::Unfolded),
            2 => Ok(Self::SoftmaxFolded),
            3 => Ok(Self::Full),
            _ => Err(format!("folding_level must be 1, 2 or 3, got {v}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpatialMode {
    /// K and V stay in L1; query tiles unroll over core rows and heads over columns.
    KvPinned,
    /// K and V are split across columns; softmax partials are reduced spatially
    /// and heads are iterated temporally.
    KvSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpatialStrategy {
    pub mode: SpatialMode,
    pub q_unroll_rows: usize,
    pub head_unroll_cols: usize,
    pub reduce_cols: usize,
    pub heads_temporal: bool,
}

impl SpatialStrategy {
    /// Columns carrying work: head columns when pinned, reduction columns when split.
    pub fn active_cols(&self) -> usize {
        match self.mode {
            SpatialMode::KvPinned => self.head_unroll_cols,
            SpatialMode::KvSplit => self.reduce_cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldingPlan {
    pub folding_level: FoldingLevel,
    /// Logical shape the plan was built for.
    pub shape: AttentionShape,
    /// Shape after rounding every extent up to its granule.
    pub padded: AttentionShape,
    pub subvolumes: Option<Subvolumes>,
    pub strategy: Option<SpatialStrategy>,
    pub l1_footprint_bytes: u64,
    #[serde(default)]
    pub transpose_plan: Option<TransposePlan>,
    #[serde(default)]
    pub padding_plan: Option<Vec<PadPlan>>,
}

impl FoldingPlan {
    pub fn unfolded(shape: AttentionShape, padded: AttentionShape) -> Self {
        Self {
            folding_level: FoldingLevel::Unfolded,
            shape,
            padded,
            subvolumes: None,
            strategy: None,
            l1_footprint_bytes: 0,
            transpose_plan: None,
            padding_plan: None,
        }
    }

    pub fn is_folded(&self) -> bool {
        self.folding_level >= FoldingLevel::SoftmaxFolded
    }

    pub fn q_tiles(&self) -> usize {
        self.subvolumes.map_or(1, |sv| self.padded.lq / sv.q_rows())
    }

    pub fn k_tiles(&self) -> usize {
        self.subvolumes.map_or(1, |sv| self.padded.lk / sv.k_rows())
    }

    /// The same tiling applied to a shape that differs only in head count or
    /// bias/mask sharing; the spatial strategy is recomputed for it.
    pub fn rebind(&self, shape: AttentionShape, cfg: &NpuConfig) -> Result<FoldingPlan, TilerError> {
        shape.validate()?;
        let s = self.shape;
        if (shape.lq, shape.lk, shape.d, shape.dv, shape.k_transpose) != (s.lq, s.lk, s.d, s.dv, s.k_transpose)
            || shape.bias.is_some() != s.bias.is_some()
            || shape.mask.is_some() != s.mask.is_some()
        {
            return Err(TilerError::InvalidShape("rebind changes per-head extents or operand structure".into()));
        }
        let padded = AttentionShape { heads: shape.heads, kv_heads: shape.kv_heads, bias: shape.bias, mask: shape.mask, ..self.padded };
        let strategy = self.subvolumes.map(|sv| assign_strategy(&sv, &padded, cfg));
        Ok(FoldingPlan { shape, padded, strategy, ..self.clone() })
    }
}

fn aligned_divisors(extent: usize, granule: usize) -> Vec<usize> {
    (1..=extent / granule)
        .rev()
        .map(|m| m * granule)
        .filter(|t| extent.is_multiple_of(*t))
        .collect()
}

/// All granule-aligned tilings of a padded shape, largest query tile first,
/// then largest key/value tile.
pub fn enumerate_tilings(
    shape: &AttentionShape,
    gran: &KernelGranularity,
) -> Result<Vec<Subvolumes>, TilerError> {
    shape.validate()?;
    shape.check_padded(gran)?;
    let q_rows = aligned_divisors(shape.lq, gran.q_rows());
    let k_rows = aligned_divisors(shape.lk, gran.kv_rows());
    let mut out = Vec::with_capacity(q_rows.len() * k_rows.len());
    for &rq in &q_rows {
        for &rk in &k_rows {
            let score = TileDims::new(rq, rk);
            out.push(Subvolumes {
                s_q: TileDims::new(rq, shape.d),
                s_k: TileDims::new(rk, shape.d),
                s_v: TileDims::new(rk, shape.dv),
                s_b: shape.bias.map(|_| score),
                s_m: shape.mask.map(|_| score),
                kv_resident: rk == shape.lk,
            });
        }
    }
    // The nested loops already produce (s_q desc, s_k desc); s_v and the
    // total tile count are functions of those two keys.
    Ok(out)
}

/// Peak L1 bytes per core for one tiling at a folding level.
///
/// Streamed operands are multiplied by `gran.stream_buffers`: Q plus the
/// bias/mask tiles when K/V are resident, K/V plus bias/mask tiles otherwise.
/// Level 1 has no L1 plan and reports 0.
pub fn l1_footprint(
    sv: &Subvolumes,
    level: FoldingLevel,
    cfg: &NpuConfig,
    gran: &KernelGranularity,
) -> u64 {
    if level == FoldingLevel::Unfolded {
        return 0;
    }
    let buf = gran.stream_buffers;
    let (q_buf, kv_buf) = if sv.kv_resident { (buf, 1) } else { (1, buf) };
    let score = sv.score_tile().elems();
    let full = level == FoldingLevel::Full;

    let mut elems = sv.s_q.elems() * q_buf + sv.s_k.elems() * kv_buf + score;
    if full {
        elems += sv.s_v.elems() * kv_buf + sv.s_q.rows as u64 * sv.s_v.cols as u64;
    }
    elems += sv.s_b.map_or(0, |t| t.elems() * buf);
    elems += sv.s_m.map_or(0, |t| t.elems() * buf);
    elems += 2 * sv.s_q.rows as u64;
    elems * u64::from(cfg.elem_bytes)
}

pub fn assign_strategy(sv: &Subvolumes, padded: &AttentionShape, cfg: &NpuConfig) -> SpatialStrategy {
    let q_tiles = padded.lq / sv.q_rows();
    let q_unroll_rows = cfg.rows.min(q_tiles);
    if sv.kv_resident {
        SpatialStrategy {
            mode: SpatialMode::KvPinned,
            q_unroll_rows,
            head_unroll_cols: cfg.cols.min(padded.heads),
            reduce_cols: 1,
            heads_temporal: false,
        }
    } else {
        let k_tiles = padded.lk / sv.k_rows();
        SpatialStrategy {
            mode: SpatialMode::KvSplit,
            q_unroll_rows,
            head_unroll_cols: 1,
            reduce_cols: cfg.cols.min(k_tiles),
            heads_temporal: true,
        }
    }
}

/// First feasible tiling at exactly `level` (2 or 3), or `None`.
pub fn plan_at_level(
    shape: &AttentionShape,
    gran: &KernelGranularity,
    cfg: &NpuConfig,
    level: FoldingLevel,
) -> Result<Option<FoldingPlan>, TilerError> {
    shape.validate()?;
    let padded = shape.padded(gran)?;
    if level == FoldingLevel::Unfolded {
        return Ok(Some(FoldingPlan::unfolded(*shape, padded)));
    }
    let found = enumerate_tilings(&padded, gran)?.into_iter().find_map(|sv| {
        let bytes = l1_footprint(&sv, level, cfg, gran);
        (bytes <= cfg.l1_bytes).then_some((sv, bytes))
    });
    Ok(found.map(|(sv, bytes)| FoldingPlan {
        folding_level: level,
        shape: *shape,
        padded,
        subvolumes: Some(sv),
        strategy: Some(assign_strategy(&sv, &padded, cfg)),
        l1_footprint_bytes: bytes,
        transpose_plan: None,
        padding_plan: None,
    }))
}

/// Try level 3, then level 2 (fresh scan), then fall back to unfolded.
pub fn select_tiling(
    shape: &AttentionShape,
    gran: &KernelGranularity,
    cfg: &NpuConfig,
) -> Result<FoldingPlan, TilerError> {
    for level in [FoldingLevel::Full, FoldingLevel::SoftmaxFolded] {
        if let Some(plan) = plan_at_level(shape, gran, cfg, level)? {
            return Ok(plan);
        }
    }
    plan_at_level(shape, gran, cfg, FoldingLevel::Unfolded).map(|p| p.expect("level 1 always exists"))
}

/// Fraction of the core grid that receives at least one tile.
pub fn utilization(plan: &FoldingPlan, cfg: &NpuConfig) -> Result<f64, TilerError> {
    let strategy = plan.strategy.ok_or(TilerError::NotApplicable)?;
    if !plan.is_folded() {
        return Err(TilerError::NotApplicable);
    }
    let busy = strategy.q_unroll_rows * strategy.active_cols();
    Ok(busy as f64 / cfg.cores() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hw::default_xdna2_config;

    fn gran() -> KernelGranularity {
        KernelGranularity::default()
    }

    #[test]
    fn single_candidate_for_minimal_shape() {
        let shape = AttentionShape::new(1, 8, 8, 8);
        let c = enumerate_tilings(&shape, &gran()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].s_q, TileDims::new(8, 8));
        assert_eq!(c[0].s_k, TileDims::new(8, 8));
        assert!(c[0].kv_resident);
    }

    #[test]
    fn larger_query_tiles_come_first() {
        let shape = AttentionShape::new(1, 16, 16, 8);
        let c = enumerate_tilings(&shape, &gran()).unwrap();
        let rows: Vec<_> = c.iter().map(|s| (s.q_rows(), s.k_rows())).collect();
        assert_eq!(rows, vec![(16, 16), (16, 8), (8, 16), (8, 8)]);
    }

    #[test]
    fn head_count_does_not_change_candidates() {
        let a = enumerate_tilings(&AttentionShape::new(1, 64, 32, 16), &gran()).unwrap();
        let b = enumerate_tilings(&AttentionShape::new(12, 64, 32, 16), &gran()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unpadded_shape_is_rejected() {
        let err = enumerate_tilings(&AttentionShape::new(1, 197, 64, 64), &gran()).unwrap_err();
        assert!(matches!(err, TilerError::Unpadded { dim: "lq", value: 197, .. }));
    }

    #[test]
    fn footprint_of_unit_tiles() {
        let sv = enumerate_tilings(&AttentionShape::new(1, 8, 8, 8), &gran()).unwrap()[0];
        let cfg = default_xdna2_config();
        let single = KernelGranularity { stream_buffers: 1, ..gran() };
        assert_eq!(l1_footprint(&sv, FoldingLevel::Full, &cfg, &single), 672);
        assert!(
            l1_footprint(&sv, FoldingLevel::SoftmaxFolded, &cfg, &gran())
                < l1_footprint(&sv, FoldingLevel::Full, &cfg, &gran())
        );
    }

    #[test]
    fn mask_tile_adds_buffered_score_bytes() {
        let cfg = default_xdna2_config();
        let base = AttentionShape::new(1, 32, 64, 16);
        let masked = base.with_mask(Sharing::PerHead);
        let a = enumerate_tilings(&base, &gran()).unwrap();
        let b = enumerate_tilings(&masked, &gran()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            let delta = l1_footprint(y, FoldingLevel::Full, &cfg, &gran())
                - l1_footprint(x, FoldingLevel::Full, &cfg, &gran());
            assert_eq!(delta, 2 * x.score_tile().elems() * gran().stream_buffers);
        }
    }

    #[test]
    fn tiny_shape_folds_fully_and_pins_kv() {
        let plan = select_tiling(&AttentionShape::new(1, 8, 8, 8), &gran(), &default_xdna2_config()).unwrap();
        assert_eq!(plan.folding_level, FoldingLevel::Full);
        assert_eq!(plan.strategy.unwrap().mode, SpatialMode::KvPinned);
    }

    #[test]
    fn tiny_l1_falls_back_to_unfolded() {
        let cfg = NpuConfig { l1_bytes: 256, ..default_xdna2_config() };
        let plan = select_tiling(&AttentionShape::new(1, 64, 64, 64), &gran(), &cfg).unwrap();
        assert_eq!(plan.folding_level, FoldingLevel::Unfolded);
        assert!(plan.subvolumes.is_none());
        assert_eq!(utilization(&plan, &cfg), Err(TilerError::NotApplicable));
    }

    #[test]
    fn utilization_examples() {
        let cfg = default_xdna2_config();
        // 4 q tiles of 8 rows, 8 heads, pinned -> whole grid.
        let small_l1 = NpuConfig { l1_bytes: 1000, ..cfg };
        let full = select_tiling(&AttentionShape::new(8, 32, 8, 8), &gran(), &small_l1).unwrap();
        let st = full.strategy.unwrap();
        assert_eq!((st.mode, st.q_unroll_rows, st.head_unroll_cols), (SpatialMode::KvPinned, 4, 8));
        assert_eq!(utilization(&full, &cfg).unwrap(), 1.0);

        let one = select_tiling(&AttentionShape::new(1, 8, 8, 8), &gran(), &cfg).unwrap();
        assert_eq!(utilization(&one, &cfg).unwrap(), 1.0 / 32.0);
    }
}
