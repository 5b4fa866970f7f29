use attnfold::hw::{default_xdna2_config, KernelGranularity, NpuConfig};
use attnfold::tiler::{
    enumerate_tilings, l1_footprint, select_tiling, utilization, AttentionShape, FoldingLevel, Sharing, SpatialMode,
};
use proptest::prelude::*;

/// Footprint in elements, written out term by term.
#[allow(clippy::too_many_arguments)]
fn spreadsheet_elems(sq: u64, sk: u64, d: u64, dv: u64, lk: u64, level: u8, extras: u64, buf: u64) -> u64 {
    let resident = sk == lk;
    let q = sq * d * if resident { buf } else { 1 };
    let kv_buf = if resident { 1 } else { buf };
    let k = sk * d * kv_buf;
    let v = if level == 3 { sk * dv * kv_buf } else { 0 };
    let score = sq * sk;
    let out = if level == 3 { sq * dv } else { 0 };
    let additive = extras * sq * sk * buf;
    let stats = 2 * sq;
    q + k + v + score + out + additive + stats
}

/// Brute force: every (s_q, s_k) pair of granule multiples dividing the
/// padded extents, best = largest s_q then largest s_k.
fn brute_force(shape: &AttentionShape, cfg: &NpuConfig, gran: &KernelGranularity) -> (u8, Option<(usize, usize)>) {
    let p = shape.padded(gran).unwrap();
    let extras = u64::from(shape.bias.is_some()) + u64::from(shape.mask.is_some());
    for level in [3u8, 2] {
        let mut best: Option<(usize, usize)> = None;
        for sq in (1..=p.lq).filter(|s| s % gran.q_rows() == 0 && p.lq.is_multiple_of(*s)) {
            for sk in (1..=p.lk).filter(|s| s % gran.kv_rows() == 0 && p.lk.is_multiple_of(*s)) {
                let bytes = spreadsheet_elems(sq as u64, sk as u64, p.d as u64, p.dv as u64, p.lk as u64, level, extras, gran.stream_buffers)
                    * u64::from(cfg.elem_bytes);
                if bytes <= cfg.l1_bytes && best.is_none_or(|b| (sq, sk) > b) {
                    best = Some((sq, sk));
                }
            }
        }
        if best.is_some() {
            return (level, best);
        }
    }
    (1, None)
}

#[test]
fn spreadsheet_values() {
    let cfg = default_xdna2_config();
    let gran = KernelGranularity::default();
    let one = KernelGranularity { stream_buffers: 1, ..gran };
    let sv = enumerate_tilings(&AttentionShape::new(1, 8, 8, 8), &gran).unwrap()[0];
    // 64 (Q) + 64 (K) + 64 (V) + 64 (scores) + 64 (out) + 16 (stats) = 336 elements
    assert_eq!(l1_footprint(&sv, FoldingLevel::Full, &cfg, &one), 672);
    // double-buffered Q adds another 64 elements
    assert_eq!(l1_footprint(&sv, FoldingLevel::Full, &cfg, &gran), 800);
    // level 2 drops V and the output tile
    assert_eq!(l1_footprint(&sv, FoldingLevel::SoftmaxFolded, &cfg, &gran), 800 - 256);
    let masked = enumerate_tilings(&AttentionShape::new(1, 8, 8, 8).with_mask(Sharing::PerHead), &gran).unwrap()[0];
    assert_eq!(l1_footprint(&masked, FoldingLevel::Full, &cfg, &gran), 800 + 2 * 64 * 2);
}

#[test]
fn select_tiling_matches_brute_force_on_grid() {
    let gran = KernelGranularity::default();
    let extents = [8, 16, 24, 32, 48, 64, 96, 128];
    let mut checked = 0;
    for l1_kb in [8u64, 16, 32, 64] {
        let cfg = NpuConfig { l1_bytes: l1_kb * 1024, ..default_xdna2_config() };
        for &lq in &extents {
            for &lk in &extents {
                for d in [8, 16, 32, 64] {
                    for extra in 0..3 {
                        let mut shape = AttentionShape::new(2, lq, lk, d);
                        if extra >= 1 {
                            shape = shape.with_mask(Sharing::PerHead);
                        }
                        if extra == 2 {
                            shape = shape.with_bias(Sharing::Shared);
                        }
                        let plan = select_tiling(&shape, &gran, &cfg).unwrap();
                        let (level, best) = brute_force(&shape, &cfg, &gran);
                        assert_eq!(plan.folding_level.as_u8(), level, "{shape:?} l1={l1_kb}KB");
                        assert_eq!(plan.subvolumes.map(|s| (s.q_rows(), s.k_rows())), best, "{shape:?} l1={l1_kb}KB");
                        if plan.is_folded() {
                            assert!(plan.l1_footprint_bytes <= cfg.l1_bytes);
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    assert_eq!(checked, 4 * 8 * 8 * 4 * 3);
}

/// Occupied cores computed from the tile grid: a core is busy if some
/// (q tile, head) or (q tile, k tile) lands on it.
fn occupancy(shape: &AttentionShape, cfg: &NpuConfig, gran: &KernelGranularity) -> Option<f64> {
    let plan = select_tiling(shape, gran, cfg).unwrap();
    let sv = plan.subvolumes?;
    let p = plan.padded;
    let q_tiles = p.lq / sv.q_rows();
    let mut busy = vec![vec![false; cfg.cols]; cfg.rows];
    if sv.kv_resident {
        for qt in 0..q_tiles {
            for h in 0..p.heads {
                busy[qt % cfg.rows][h % cfg.cols] = true;
            }
        }
    } else {
        for qt in 0..q_tiles {
            for kt in 0..p.lk / sv.k_rows() {
                busy[qt % cfg.rows][kt % cfg.cols] = true;
            }
        }
    }
    let n = busy.iter().flatten().filter(|b| **b).count();
    Some(n as f64 / cfg.cores() as f64)
}

#[test]
fn utilization_matches_occupancy_oracle() {
    let gran = KernelGranularity::default();
    let cfg = default_xdna2_config();
    for heads in [1, 3, 8, 12] {
        for l in [8, 32, 64, 200, 512] {
            for d in [16, 64] {
                let shape = AttentionShape::new(heads, l, l, d);
                let plan = select_tiling(&shape, &gran, &cfg).unwrap();
                if let Some(expected) = occupancy(&shape, &cfg, &gran) {
                    assert_eq!(utilization(&plan, &cfg).unwrap(), expected, "{shape:?}");
                }
            }
        }
    }
}

#[test]
fn strategy_follows_residency() {
    let gran = KernelGranularity::default();
    let cfg = default_xdna2_config();
    let small = select_tiling(&AttentionShape::new(12, 64, 64, 64), &gran, &cfg).unwrap();
    assert_eq!(small.strategy.unwrap().mode, SpatialMode::KvPinned);
    let large = select_tiling(&AttentionShape::new(12, 1024, 1024, 64), &gran, &cfg).unwrap();
    let st = large.strategy.unwrap();
    assert_eq!(st.mode, SpatialMode::KvSplit);
    assert!(st.heads_temporal);
    assert_eq!(st.reduce_cols, cfg.cols);
}

proptest! {
    #[test]
    fn level_never_drops_when_l1_grows(
        lq in 1usize..300, lk in 1usize..300, d in 1usize..130, heads in 1usize..16,
        mask in any::<bool>(), kb in 1u64..64, extra_kb in 1u64..64,
    ) {
        let gran = KernelGranularity::default();
        let mut shape = AttentionShape::new(heads, lq, lk, d);
        if mask {
            shape = shape.with_mask(Sharing::PerHead);
        }
        let small = NpuConfig { l1_bytes: kb * 1024, ..default_xdna2_config() };
        let big = NpuConfig { l1_bytes: (kb + extra_kb) * 1024, ..default_xdna2_config() };
        let a = select_tiling(&shape, &gran, &small).unwrap();
        let b = select_tiling(&shape, &gran, &big).unwrap();
        prop_assert!(a.folding_level <= b.folding_level);
    }
}
