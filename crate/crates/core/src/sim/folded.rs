//! Tile-by-tile execution of a folded attention plan.

use std::collections::HashMap;

use super::inputs::AttentionInputs;
use super::schedule::{dram_write, l1, span, Access, Direction, FirstTouch, Operand, Schedule, Step, StepKind, TileCoord};
use super::softmax::{combine_partials, rescale, SoftmaxPartial};
use crate::error::SimError;
use crate::hw::NpuConfig;
use crate::parallel::{self, ExecMode};
use crate::tensor::Tensor;
use crate::tiler::{AttentionShape, FoldingLevel, FoldingPlan, Sharing, SpatialMode, SpatialStrategy, Subvolumes};
use crate::transforms::{transpose_via_blocks, SIM_KEY_MASK};

/// Run `plan` on `inputs` and return the output at padded extents
/// `[heads, Lq_p, dv_p]` together with the schedule that produced it.
///
/// Inputs may be given at logical extents (they are padded the way the DMA
/// would pad them) or already padded to `plan.padded`.
pub fn execute_folded(plan: &FoldingPlan, inputs: &AttentionInputs, cfg: &NpuConfig) -> Result<(Tensor, Schedule), SimError> {
    execute_folded_with(plan, inputs, cfg, ExecMode::default())
}

pub fn execute_folded_with(
    plan: &FoldingPlan,
    inputs: &AttentionInputs,
    cfg: &NpuConfig,
    mode: ExecMode,
) -> Result<(Tensor, Schedule), SimError> {
    let (sv, strategy) = folded_parts(plan)?;
    let padded = pad_inputs(inputs, plan)?;
    let p = plan.padded;
    let k_tiles = plan.k_tiles();
    let cols = match strategy.mode {
        SpatialMode::KvPinned => 1,
        SpatialMode::KvSplit => strategy.reduce_cols.clamp(1, k_tiles),
    };
    let kt = key_layout(plan, &padded)?;

    let heads = parallel::map_range(mode, p.heads, |h| {
        let ctx = HeadCtx::new(plan, &padded, kt.as_ref(), h, sv);
        match plan.folding_level {
            FoldingLevel::Full => ctx.run_full(k_tiles, cols),
            _ => ctx.run_softmax_folded(k_tiles, cols),
        }
    });
    let mut z = Tensor::zeros(&[p.heads, p.lq, p.dv]);
    for (h, m) in heads.into_iter().enumerate() {
        z.matrix_mut(h).copy_from_slice(&m);
    }
    Ok((z, build_folded_schedule(plan, cfg)?))
}

/// First pass of a level-2 plan only: the normalized softmax output at padded
/// extents `[heads, Lq_p, Lk_p]`, as written to DRAM for the separate SM*V kernel.
pub fn execute_softmax_stage(plan: &FoldingPlan, inputs: &AttentionInputs, mode: ExecMode) -> Result<Tensor, SimError> {
    let (sv, strategy) = folded_parts(plan)?;
    let padded = pad_inputs(inputs, plan)?;
    let p = plan.padded;
    let k_tiles = plan.k_tiles();
    let cols = match strategy.mode {
        SpatialMode::KvPinned => 1,
        SpatialMode::KvSplit => strategy.reduce_cols.clamp(1, k_tiles),
    };
    let kt = key_layout(plan, &padded)?;
    let heads = parallel::map_range(mode, p.heads, |h| HeadCtx::new(plan, &padded, kt.as_ref(), h, sv).softmax_stage(k_tiles, cols));
    let mut sm = Tensor::zeros(&[p.heads, p.lq, p.lk]);
    for (h, m) in heads.into_iter().enumerate() {
        sm.matrix_mut(h).copy_from_slice(&m);
    }
    Ok(sm)
}

fn key_layout(plan: &FoldingPlan, padded: &AttentionInputs) -> Result<Option<Tensor>, SimError> {
    match plan.transpose_plan.as_ref().filter(|_| plan.shape.k_transpose) {
        Some(t) => Ok(Some(transposed_keys(&padded.k, t.block)?)),
        None => Ok(None),
    }
}

/// Crop a padded block output back to the plan's logical extents.
pub fn crop_output(z: &Tensor, plan: &FoldingPlan) -> Result<Tensor, SimError> {
    let l = plan.shape;
    let p = plan.padded;
    if z.dims() != [p.heads, p.lq, p.dv] {
        return Err(SimError::PlanMismatch(format!("output {:?} is not at padded extents", z.dims())));
    }
    Ok(Tensor::from_fn(&[l.heads, l.lq, l.dv], |i| z.get(i)))
}

/// Pad logical operands to `plan.padded`: zeros everywhere except padded key
/// columns of the mask, which get [`SIM_KEY_MASK`]. Already padded operands
/// are returned unchanged.
pub fn pad_inputs(inputs: &AttentionInputs, plan: &FoldingPlan) -> Result<AttentionInputs, SimError> {
    let got = inputs.shape()?;
    let (l, p) = (plan.shape, plan.padded);
    let same = |a: &AttentionShape, b: &AttentionShape| {
        (a.heads, a.kv_heads, a.lq, a.lk, a.d, a.dv) == (b.heads, b.kv_heads, b.lq, b.lk, b.d, b.dv)
    };
    if got.bias.is_some() != l.bias.is_some() || got.mask.is_some() != l.mask.is_some() {
        return Err(SimError::PlanMismatch("bias/mask presence differs from the plan".into()));
    }
    if same(&got, &p) {
        return Ok(inputs.clone());
    }
    if !same(&got, &l) {
        return Err(SimError::PlanMismatch(format!(
            "inputs (heads {}, kv {}, lq {}, lk {}, d {}, dv {}) match neither logical nor padded plan shape",
            got.heads, got.kv_heads, got.lq, got.lk, got.d, got.dv
        )));
    }
    let grow = |t: &Tensor, dims: [usize; 3], col_fill: f64| {
        let src = t.dims().to_vec();
        Tensor::from_fn(&dims, |i| {
            if i[1] < src[1] && i[2] < src[2] {
                t.get(i)
            } else if i[2] >= src[2] {
                col_fill
            } else {
                0.0
            }
        })
    };
    let extra_heads = |t: &Tensor| t.dims()[0];
    Ok(AttentionInputs {
        q: grow(&inputs.q, [p.heads, p.lq, p.d], 0.0),
        k: grow(&inputs.k, [p.kv_heads, p.lk, p.d], 0.0),
        v: grow(&inputs.v, [p.kv_heads, p.lk, p.dv], 0.0),
        bias: inputs.bias.as_ref().map(|b| grow(b, [extra_heads(b), p.lq, p.lk], 0.0)),
        mask: inputs.mask.as_ref().map(|m| grow(m, [extra_heads(m), p.lq, p.lk], SIM_KEY_MASK)),
    })
}

fn folded_parts(plan: &FoldingPlan) -> Result<(Subvolumes, SpatialStrategy), SimError> {
    match (plan.is_folded(), plan.subvolumes, plan.strategy) {
        (true, Some(sv), Some(st)) => Ok((sv, st)),
        _ => Err(SimError::PlanMismatch(format!(
            "folded execution needs a level 2 or 3 plan with subvolumes, got level {}",
            plan.folding_level.as_u8()
        ))),
    }
}

/// `[kv_heads, d_p, Lk_p]` via the block-level DMA transpose plus the
/// in-kernel intra-block transpose.
fn transposed_keys(k: &Tensor, block: usize) -> Result<Tensor, SimError> {
    let [h, lk, d] = [k.dims()[0], k.dims()[1], k.dims()[2]];
    let mut out = Tensor::zeros(&[h, d, lk]);
    for i in 0..h {
        let m = Tensor::from_vec(&[lk, d], k.matrix(i).to_vec());
        out.matrix_mut(i).copy_from_slice(transpose_via_blocks(&m, block)?.data());
    }
    Ok(out)
}

/// Running softmax state plus unnormalized output rows.
struct Accum {
    part: SoftmaxPartial,
    acc: Vec<f64>,
}

impl Accum {
    fn neutral(rows: usize, dv: usize) -> Self {
        Self { part: SoftmaxPartial::neutral(rows), acc: vec![0.0; rows * dv] }
    }

    fn merge(self, other: Accum, dv: usize) -> Accum {
        let part = combine_partials(&self.part, &other.part).expect("equal tile rows");
        let mut acc = self.acc;
        for r in 0..part.rows() {
            let fa = rescale(self.part.m[r], part.m[r]);
            let fb = rescale(other.part.m[r], part.m[r]);
            for t in 0..dv {
                let i = r * dv + t;
                acc[i] = acc[i] * fa + other.acc[i] * fb;
            }
        }
        Accum { part, acc }
    }
}

/// Per-head view of the padded operands.
struct HeadCtx<'a> {
    p: AttentionShape,
    logical_lk: usize,
    sq: usize,
    sk: usize,
    q: &'a [f64],
    k: &'a [f64],
    k_transposed: bool,
    v: &'a [f64],
    bias: Option<&'a [f64]>,
    mask: Option<&'a [f64]>,
}

impl<'a> HeadCtx<'a> {
    fn new(plan: &FoldingPlan, x: &'a AttentionInputs, kt: Option<&'a Tensor>, h: usize, sv: Subvolumes) -> Self {
        let p = plan.padded;
        let kvh = h / p.group();
        let extra = |t: &'a Option<Tensor>| t.as_ref().map(|t| t.matrix(if t.dims()[0] == 1 { 0 } else { h }));
        Self {
            p,
            logical_lk: plan.shape.lk,
            sq: sv.q_rows(),
            sk: sv.k_rows(),
            q: x.q.matrix(h),
            k: kt.map_or_else(|| x.k.matrix(kvh), |t| t.matrix(kvh)),
            k_transposed: kt.is_some(),
            v: x.v.matrix(kvh),
            bias: extra(&x.bias),
            mask: extra(&x.mask),
        }
    }

    /// Score tile `(qt, kt)`, row-major `sq x sk`.
    fn scores(&self, qt: usize, kt: usize) -> Vec<f64> {
        let (d, lk) = (self.p.d, self.p.lk);
        let mut out = Vec::with_capacity(self.sq * self.sk);
        for r in qt * self.sq..(qt + 1) * self.sq {
            for c in kt * self.sk..(kt + 1) * self.sk {
                let mut dot = 0.0;
                for t in 0..d {
                    let kv = if self.k_transposed { self.k[t * lk + c] } else { self.k[c * d + t] };
                    dot += self.q[r * d + t] * kv;
                }
                if let Some(b) = self.bias {
                    dot += b[r * lk + c];
                }
                match self.mask {
                    Some(m) => dot += m[r * lk + c],
                    None if c >= self.logical_lk => dot += SIM_KEY_MASK,
                    None => {}
                }
                out.push(dot);
            }
        }
        out
    }

    fn tile_accum(&self, qt: usize, kt: usize) -> Accum {
        let dv = self.p.dv;
        let s = self.scores(qt, kt);
        let part = SoftmaxPartial::from_scores(&s, self.sk);
        let mut acc = vec![0.0; self.sq * dv];
        for r in 0..self.sq {
            let row = &mut acc[r * dv..(r + 1) * dv];
            for c in 0..self.sk {
                let e = (s[r * self.sk + c] - part.m[r]).exp();
                let key = kt * self.sk + c;
                for (o, &vv) in row.iter_mut().zip(&self.v[key * dv..(key + 1) * dv]) {
                    *o += e * vv;
                }
            }
        }
        Accum { part, acc }
    }

    /// Column `c` handles key tiles `c, c + cols, ...` temporally.
    fn column_tiles(k_tiles: usize, cols: usize, c: usize) -> impl Iterator<Item = usize> {
        (c..k_tiles).step_by(cols)
    }

    fn run_full(&self, k_tiles: usize, cols: usize) -> Vec<f64> {
        let dv = self.p.dv;
        let mut z = vec![0.0; self.p.lq * dv];
        for qt in 0..self.p.lq / self.sq {
            let mut total: Option<Accum> = None;
            for c in 0..cols {
                let mut col = Accum::neutral(self.sq, dv);
                for kt in Self::column_tiles(k_tiles, cols, c) {
                    col = col.merge(self.tile_accum(qt, kt), dv);
                }
                total = Some(match total {
                    None => col,
                    Some(t) => t.merge(col, dv),
                });
            }
            let total = total.expect("at least one column");
            for r in 0..self.sq {
                let row = &mut z[(qt * self.sq + r) * dv..(qt * self.sq + r + 1) * dv];
                for (o, &a) in row.iter_mut().zip(&total.acc[r * dv..(r + 1) * dv]) {
                    *o = a / total.part.s[r];
                }
            }
        }
        z
    }

    fn run_softmax_folded(&self, k_tiles: usize, cols: usize) -> Vec<f64> {
        let sm = self.softmax_stage(k_tiles, cols);
        let (lk, dv) = (self.p.lk, self.p.dv);
        // separate SM_out * V pass
        let mut z = vec![0.0; self.p.lq * dv];
        for r in 0..self.p.lq {
            let row = &mut z[r * dv..(r + 1) * dv];
            for c in 0..lk {
                let w = sm[r * lk + c];
                for (o, &vv) in row.iter_mut().zip(&self.v[c * dv..(c + 1) * dv]) {
                    *o += w * vv;
                }
            }
        }
        z
    }

    /// Normalized `Lq_p x Lk_p` softmax output of the fused level-2 kernel.
    fn softmax_stage(&self, k_tiles: usize, cols: usize) -> Vec<f64> {
        let lk = self.p.lk;
        let mut sm = vec![0.0; self.p.lq * lk];
        for qt in 0..self.p.lq / self.sq {
            let mut stats: Option<SoftmaxPartial> = None;
            for c in 0..cols {
                let mut col = SoftmaxPartial::neutral(self.sq);
                for kt in Self::column_tiles(k_tiles, cols, c) {
                    let tile = SoftmaxPartial::from_scores(&self.scores(qt, kt), self.sk);
                    col = combine_partials(&col, &tile).expect("equal tile rows");
                }
                stats = Some(match stats {
                    None => col,
                    Some(s) => combine_partials(&s, &col).expect("equal tile rows"),
                });
            }
            let stats = stats.expect("at least one column");
            for kt in 0..k_tiles {
                let s = self.scores(qt, kt);
                for r in 0..self.sq {
                    let row = qt * self.sq + r;
                    for c in 0..self.sk {
                        sm[row * lk + kt * self.sk + c] = (s[r * self.sk + c] - stats.m[r]).exp() / stats.s[r];
                    }
                }
            }
        }
        sm
    }
}

/// Tracks which operand tile each core currently holds in L1.
#[derive(Default)]
struct Residency(HashMap<((usize, usize), Operand), (usize, usize)>);

impl Residency {
    /// True when the core must fetch the tile (and records it as resident).
    fn load(&mut self, core: (usize, usize), operand: Operand, tile: (usize, usize)) -> bool {
        self.0.insert((core, operand), tile) != Some(tile)
    }
}

/// Data-independent step list of a folded plan.
pub fn build_folded_schedule(plan: &FoldingPlan, cfg: &NpuConfig) -> Result<Schedule, SimError> {
    let (sv, st) = folded_parts(plan)?;
    let (l, p) = (plan.shape, plan.padded);
    let e = u64::from(cfg.elem_bytes);
    let (sq, sk) = (sv.q_rows(), sv.k_rows());
    let (q_tiles, k_tiles) = (plan.q_tiles(), plan.k_tiles());
    let group = p.group();
    let adds = u64::from(l.bias.is_some()) + u64::from(l.mask.is_some());
    let pinned = st.mode == SpatialMode::KvPinned;
    let cols = if pinned { 1 } else { st.reduce_cols.clamp(1, k_tiles) };
    let rows = st.q_unroll_rows.max(1);
    let head_cols = st.head_unroll_cols.max(1);

    let lq_span = |qt: usize| span(qt * sq, sq, l.lq) as u64;
    let lk_span = |kt: usize| span(kt * sk, sk, l.lk) as u64;
    let extra_head = |s: Option<Sharing>, h: usize| if s == Some(Sharing::Shared) { 0 } else { h };
    let core_of = |h: usize, qt: usize, kt: usize| {
        if pinned {
            (qt % rows, h % head_cols)
        } else {
            (qt % rows, kt % cols)
        }
    };
    let qk_ops = (2 * sq * sk * p.d) as u64 + adds * (sq * sk) as u64;
    let (sm_ops, sv_ops) = ((5 * sq * sk) as u64, (2 * sq * sk * p.dv) as u64);
    let partial_bytes = |with_acc: bool| e * (2 * sq + if with_acc { sq * p.dv } else { 0 }) as u64;

    let mut steps = Vec::new();
    let mut touch = FirstTouch::new();
    let mut l1res = Residency::default();

    // Reads of every operand a score tile needs.
    let score_reads = |touch: &mut FirstTouch, l1res: &mut Residency, h: usize, qt: usize, kt: usize, with_v: bool| {
        let core = core_of(h, qt, kt);
        let kvh = h / group;
        let mut acc: Vec<Access> = Vec::new();
        if l1res.load(core, Operand::Q, (h, qt)) {
            acc.push(touch.read(Operand::Q, (h, qt, 0), lq_span(qt) * l.d as u64 * e, (sq * p.d) as u64 * e));
        }
        if l1res.load(core, Operand::K, (kvh, kt)) {
            acc.push(touch.read(Operand::K, (kvh, kt, 0), lk_span(kt) * l.d as u64 * e, (sk * p.d) as u64 * e));
        }
        if with_v && l1res.load(core, Operand::V, (kvh, kt)) {
            acc.push(touch.read(Operand::V, (kvh, kt, 0), lk_span(kt) * l.dv as u64 * e, (sk * p.dv) as u64 * e));
        }
        let tile_bytes = (lq_span(qt) * lk_span(kt) * e, (sq * sk) as u64 * e);
        if l.bias.is_some() {
            acc.push(touch.read(Operand::Bias, (extra_head(l.bias, h), qt, kt), tile_bytes.0, tile_bytes.1));
        }
        if l.mask.is_some() {
            acc.push(touch.read(Operand::Mask, (extra_head(l.mask, h), qt, kt), tile_bytes.0, tile_bytes.1));
        }
        acc.push(l1(Operand::Scores, Direction::Write, (sq * sk) as u64 * e));
        acc.push(l1(Operand::Scores, Direction::Read, (sq * sk) as u64 * e));
        (core, acc)
    };

    for h in 0..p.heads {
        for qt in 0..q_tiles {
            let coord = |kt: Option<usize>| TileCoord { head: h, q_tile: Some(qt), k_tile: kt };
            let out_core = core_of(h, qt, 0);
            let emit_reductions = |steps: &mut Vec<Step>, with_acc: bool, pass: usize| {
                for c in 1..cols {
                    steps.push(Step {
                        core: (out_core.0, c),
                        kind: StepKind::Reduce,
                        pass,
                        tile: coord(None),
                        accesses: vec![Access {
                            operand: Operand::Partial,
                            level: super::schedule::MemLevel::L2,
                            dir: Direction::Read,
                            bytes: partial_bytes(with_acc),
                        }],
                        ops: 0,
                    });
                }
            };
            match plan.folding_level {
                FoldingLevel::Full => {
                    for c in 0..cols {
                        for kt in HeadCtx::column_tiles(k_tiles, cols, c) {
                            let (core, accesses) = score_reads(&mut touch, &mut l1res, h, qt, kt, true);
                            steps.push(Step {
                                core,
                                kind: StepKind::FusedTile,
                                pass: 0,
                                tile: coord(Some(kt)),
                                accesses,
                                ops: qk_ops + sm_ops + sv_ops,
                            });
                        }
                    }
                    emit_reductions(&mut steps, true, 0);
                    steps.push(Step {
                        core: out_core,
                        kind: StepKind::Finalize,
                        pass: 0,
                        tile: coord(None),
                        accesses: vec![dram_write(Operand::Out, lq_span(qt) * l.dv as u64 * e)],
                        ops: 0,
                    });
                }
                _ => {
                    let sm_write = |kt: usize| dram_write(Operand::SmOut, lq_span(qt) * lk_span(kt) * e);
                    if pinned {
                        let (core, mut accesses) = score_reads(&mut touch, &mut l1res, h, qt, 0, false);
                        accesses.push(sm_write(0));
                        steps.push(Step { core, kind: StepKind::SoftmaxEmit, pass: 0, tile: coord(Some(0)), accesses, ops: qk_ops + sm_ops });
                        continue;
                    }
                    for c in 0..cols {
                        for kt in HeadCtx::column_tiles(k_tiles, cols, c) {
                            let (core, accesses) = score_reads(&mut touch, &mut l1res, h, qt, kt, false);
                            steps.push(Step { core, kind: StepKind::SoftmaxStats, pass: 0, tile: coord(Some(kt)), accesses, ops: qk_ops + sm_ops });
                        }
                    }
                    emit_reductions(&mut steps, false, 0);
                    for c in 0..cols {
                        for kt in HeadCtx::column_tiles(k_tiles, cols, c) {
                            let (core, mut accesses) = score_reads(&mut touch, &mut l1res, h, qt, kt, false);
                            accesses.push(sm_write(kt));
                            steps.push(Step { core, kind: StepKind::SoftmaxEmit, pass: 0, tile: coord(Some(kt)), accesses, ops: qk_ops });
                        }
                    }
                }
            }
        }
    }

    if plan.folding_level == FoldingLevel::SoftmaxFolded {
        // Standalone SM_out * V kernel: one pass, fresh first-touch scope.
        let mut touch = FirstTouch::new();
        for h in 0..p.heads {
            let kvh = h / group;
            for qt in 0..q_tiles {
                let accesses = vec![
                    touch.read(Operand::SmOut, (h, qt, 0), lq_span(qt) * l.lk as u64 * e, (sq * p.lk) as u64 * e),
                    touch.read(Operand::V, (kvh, 0, 0), (l.lk * l.dv) as u64 * e, (p.lk * p.dv) as u64 * e),
                    dram_write(Operand::Out, lq_span(qt) * l.dv as u64 * e),
                ];
                steps.push(Step {
                    core: (qt % cfg.rows, h % cfg.cols),
                    kind: StepKind::SvMatMul,
                    pass: 1,
                    tile: TileCoord { head: h, q_tile: Some(qt), k_tile: None },
                    accesses,
                    ops: (2 * sq * p.lk * p.dv) as u64,
                });
            }
        }
    }
    Ok(Schedule { plan: plan.clone(), steps })
}
