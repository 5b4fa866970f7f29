use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::tiler::FoldingPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemLevel {
    Dram,
    L2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Q,
    K,
    /// K after a standalone transpose pass.
    KT,
    V,
    Bias,
    Mask,
    /// QK^T scores.
    Scores,
    /// Scores after the bias add.
    BiasedScores,
    /// Scores after the mask add.
    MaskedScores,
    /// Normalized softmax output.
    SmOut,
    /// Softmax statistics and partial output accumulators exchanged between cores.
    Partial,
    Out,
}

impl Operand {
    /// Produced and consumed inside the attention block.
    pub fn is_intermediate(self) -> bool {
        matches!(
            self,
            Operand::KT | Operand::Scores | Operand::BiasedScores | Operand::MaskedScores | Operand::SmOut | Operand::Partial
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepKind {
    /// Level 3: QK^T, adds, online softmax update and SM*V on one tile pair.
    FusedTile,
    /// Level 2: QK^T, adds and softmax statistics on one tile pair.
    SoftmaxStats,
    /// Level 2: recompute scores and emit a normalized SM_out tile.
    SoftmaxEmit,
    /// Spatial merge of column partials.
    Reduce,
    /// Final normalization and write of an output tile.
    Finalize,
    TransposeK,
    QkMatMul,
    AddBias,
    AddMask,
    Softmax,
    SvMatMul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub operand: Operand,
    pub level: MemLevel,
    pub dir: Direction,
    pub bytes: u64,
}

/// Tile coordinates touched by a step; `None` where the step spans the whole axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileCoord {
    pub head: usize,
    pub q_tile: Option<usize>,
    pub k_tile: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// Core (row, col) the step runs on.
    pub core: (usize, usize),
    pub kind: StepKind,
    /// Index of the pass (standalone kernel launch) the step belongs to.
    pub pass: usize,
    pub tile: TileCoord,
    pub accesses: Vec<Access>,
    pub ops: u64,
}

impl Step {
    pub fn dram_bytes(&self) -> u64 {
        self.accesses.iter().filter(|a| a.level == MemLevel::Dram).map(|a| a.bytes).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub plan: FoldingPlan,
    pub steps: Vec<Step>,
}

impl Schedule {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn accesses(&self) -> impl Iterator<Item = &Access> {
        self.steps.iter().flat_map(|s| &s.accesses)
    }

    /// Bytes summed over accesses matching the filter.
    pub fn bytes_where(&self, f: impl Fn(&Access) -> bool) -> u64 {
        self.accesses().filter(|a| f(a)).map(|a| a.bytes).sum()
    }

    pub fn dram_bytes_of(&self, operand: Operand, dir: Direction) -> u64 {
        self.bytes_where(|a| a.level == MemLevel::Dram && a.operand == operand && a.dir == dir)
    }

    pub fn compute_ops(&self) -> u64 {
        self.steps.iter().map(|s| s.ops).sum()
    }

    /// Bytes exchanged between cores for spatial reduction.
    pub fn reduction_hop_bytes(&self) -> u64 {
        self.bytes_where(|a| a.operand == Operand::Partial)
    }

    pub fn passes(&self) -> usize {
        self.steps.iter().map(|s| s.pass + 1).max().unwrap_or(0)
    }
}

/// Within one pass, the first read of a tile comes from DRAM and later reads
/// of the same tile are served from L2.
#[derive(Debug, Default)]
pub(crate) struct FirstTouch {
    seen: HashSet<(Operand, usize, usize, usize)>,
}

impl FirstTouch {
    pub(crate) fn new() -> Self {
        Self::default()
    }

    /// Read access for tile `key` of `operand`; `dram_bytes` are the logical
    /// bytes fetched on first touch, `l2_bytes` the padded bytes of a re-read.
    pub(crate) fn read(&mut self, operand: Operand, key: (usize, usize, usize), dram_bytes: u64, l2_bytes: u64) -> Access {
        if self.seen.insert((operand, key.0, key.1, key.2)) {
            Access { operand, level: MemLevel::Dram, dir: Direction::Read, bytes: dram_bytes }
        } else {
            Access { operand, level: MemLevel::L2, dir: Direction::Read, bytes: l2_bytes }
        }
    }
}

pub(crate) fn dram_write(operand: Operand, bytes: u64) -> Access {
    Access { operand, level: MemLevel::Dram, dir: Direction::Write, bytes }
}

pub(crate) fn dram_read(operand: Operand, bytes: u64) -> Access {
    Access { operand, level: MemLevel::Dram, dir: Direction::Read, bytes }
}

pub(crate) fn l1(operand: Operand, dir: Direction, bytes: u64) -> Access {
    Access { operand, level: MemLevel::L1, dir, bytes }
}

/// Elements of `[start, start + len)` that fall inside a logical extent.
pub(crate) fn span(start: usize, len: usize, logical: usize) -> usize {
    (start + len).min(logical).saturating_sub(start)
}
