use serde::{Deserialize, Serialize};

use super::folded::build_folded_schedule;
use super::schedule::{Direction, MemLevel, Schedule};
use super::unfolded::build_unfolded_schedule;
use crate::error::SimError;
use crate::hw::{KernelGranularity, NpuConfig};
use crate::tiler::{utilization, FoldingPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    ComputeBound,
    MemoryBound,
}

/// Roofline cost of one schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dram_bytes: u64,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    /// On-chip bytes moved by spatial reduction; not part of `dram_bytes`.
    pub reduction_hop_bytes: u64,
    pub compute_ops: u64,
    pub utilization: f64,
    pub t_compute: f64,
    pub t_memory: f64,
    pub latency: f64,
    pub bound: Bound,
}

impl CostReport {
    pub fn zero() -> Self {
        Self {
            dram_bytes: 0,
            dram_read_bytes: 0,
            dram_write_bytes: 0,
            reduction_hop_bytes: 0,
            compute_ops: 0,
            utilization: 0.0,
            t_compute: 0.0,
            t_memory: 0.0,
            latency: 0.0,
            bound: Bound::ComputeBound,
        }
    }
}

/// Total DRAM reads plus writes.
pub fn account_traffic(s: &Schedule) -> u64 {
    s.bytes_where(|a| a.level == MemLevel::Dram)
}

pub fn estimate_latency(s: &Schedule, cfg: &NpuConfig, util: f64) -> Result<CostReport, SimError> {
    if s.is_empty() {
        return Ok(CostReport::zero());
    }
    if !(util > 0.0 && util <= 1.0) {
        return Err(SimError::BadUtilization(util));
    }
    let dram_bytes = account_traffic(s);
    let compute_ops = s.compute_ops();
    let t_compute = compute_ops as f64 / (cfg.peak_ops_per_s * util);
    let t_memory = dram_bytes as f64 / cfg.dram_bw_bytes_per_s;
    Ok(CostReport {
        dram_bytes,
        dram_read_bytes: s.bytes_where(|a| a.level == MemLevel::Dram && a.dir == Direction::Read),
        dram_write_bytes: s.bytes_where(|a| a.level == MemLevel::Dram && a.dir == Direction::Write),
        reduction_hop_bytes: s.reduction_hop_bytes(),
        compute_ops,
        utilization: util,
        t_compute,
        t_memory,
        latency: t_compute.max(t_memory),
        bound: if t_memory > t_compute { Bound::MemoryBound } else { Bound::ComputeBound },
    })
}

/// Core-grid fraction used by a mapping. Folded plans use the tiler's
/// strategy; an unfolded block spreads query-row granules over core rows and
/// heads over columns.
pub fn mapping_utilization(plan: &FoldingPlan, cfg: &NpuConfig, gran: &KernelGranularity) -> f64 {
    if let Ok(u) = utilization(plan, cfg) {
        return u;
    }
    let rows = cfg.rows.min(plan.padded.lq / gran.q_rows().max(1)).max(1);
    let cols = cfg.cols.min(plan.padded.heads).max(1);
    (rows * cols) as f64 / cfg.cores() as f64
}

/// Folded vs unfolded cost of one block under the same core utilization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub folding_level: u8,
    pub folded: CostReport,
    pub unfolded: CostReport,
    /// `unfolded.latency / folded.latency`.
    pub speedup: f64,
}

pub fn compare_costs(plan: &FoldingPlan, cfg: &NpuConfig, gran: &KernelGranularity) -> Result<Comparison, SimError> {
    let util = mapping_utilization(plan, cfg, gran);
    let unfolded = estimate_latency(&build_unfolded_schedule(plan, cfg), cfg, util)?;
    let folded = if plan.is_folded() {
        estimate_latency(&build_folded_schedule(plan, cfg)?, cfg, util)?
    } else {
        unfolded
    };
    Ok(Comparison {
        folding_level: plan.folding_level.as_u8(),
        folded,
        unfolded,
        speedup: speedup(&folded, &unfolded),
    })
}

pub fn speedup(folded: &CostReport, unfolded: &CostReport) -> f64 {
    if folded.latency > 0.0 {
        unfolded.latency / folded.latency
    } else {
        1.0
    }
}
