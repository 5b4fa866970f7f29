use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use attnfold::graph::{
    batch_heads, evaluate, fold_attention, graph_inputs, graph_outputs, match_attention, parse_graph, AttentionMatch,
    AttentionVariant, Graph, TensorDesc, TensorRole,
};
use attnfold::hw::HwProfile;
use attnfold::sim::{
    compare_costs, crop_output, execute_folded, execute_unfolded, reference_attention, AttentionInputs, Comparison,
    CostReport,
};
use attnfold::tiler::{plan_at_level, select_tiling, FoldingLevel, FoldingPlan};
use attnfold::transforms::{granules_for, plan_padding_with_granules, plan_transpose, PadPlan, TransposePlan};
use attnfold::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{CliError, Mode, RunRequest};

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub tool: &'static str,
    pub version: &'static str,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
    pub graph_sha256: String,
    pub config: HwProfile,
    pub blocks: Vec<BlockReport>,
    /// Sum of block latencies under each mapping, and their ratio.
    pub total_folded_latency: f64,
    pub total_unfolded_latency: f64,
    pub total_speedup: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub folded_graph: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchSummary {
    pub variant: AttentionVariant,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub dv: usize,
    pub has_bias: bool,
    pub has_mask: bool,
    pub k_needs_transpose: bool,
    /// Per-head chains merged into this block.
    pub chains: usize,
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub index: usize,
    #[serde(rename = "match")]
    pub summary: MatchSummary,
    pub plan: FoldingPlan,
    pub folded: CostReport,
    pub unfolded: CostReport,
    pub speedup: f64,
    pub utilization: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub execution: Option<Execution>,
}

/// One mapping's run on the block's seeded inputs.
#[derive(Debug, Clone, Serialize)]
pub struct SubRun {
    pub input_sha256: String,
    pub max_abs_err_vs_reference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Execution {
    pub input_seed: u64,
    pub folded: SubRun,
    pub unfolded: SubRun,
    pub max_abs_folded_vs_unfolded: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphCheck {
    pub tensor: String,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub tolerance: f64,
    pub max_abs_err: f64,
    /// Folded graph vs the original graph evaluated node by node.
    pub graph_outputs: Vec<GraphCheck>,
    pub passed: bool,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn summarize(m: &AttentionMatch) -> MatchSummary {
    let s = m.shape();
    MatchSummary {
        variant: m.variant,
        num_q_heads: m.num_q_heads,
        num_kv_heads: m.num_kv_heads,
        lq: s.lq,
        lk: s.lk,
        d: s.d,
        dv: s.dv,
        has_bias: s.bias.is_some(),
        has_mask: s.mask.is_some(),
        k_needs_transpose: m.k_needs_transpose,
        chains: m.bindings.len(),
        nodes: m.node_ids(),
    }
}

/// Tile the block, then plan the K transpose and every padding the kernels need.
fn plan_block(g: &Graph, m: &AttentionMatch, profile: &HwProfile, mode: Mode) -> Result<FoldingPlan, CliError> {
    let (cfg, gran) = (&profile.npu, &profile.granularity);
    let shape = m.shape();
    let context = format!("block at `{}`", m.bindings[0].qk_node);
    let mut plan = if mode == Mode::Unfold {
        plan_at_level(&shape, gran, cfg, FoldingLevel::Unfolded).map(|p| p.expect("level 1 always exists"))
    } else {
        select_tiling(&shape, gran, cfg)
    }
    .map_err(|e| CliError::invalid(&context, e))?;

    if m.k_needs_transpose {
        let p = plan.padded;
        let desc = TensorDesc::new(m.k.clone(), &[p.kv_heads, p.lk, p.d], TensorRole::K);
        let t: TransposePlan = plan_transpose(&desc, cfg, gran, plan.is_folded()).map_err(|e| CliError::invalid(&context, e))?;
        plan.transpose_plan = Some(t);
    }

    let mut pads: Vec<PadPlan> = Vec::new();
    let mut seen = BTreeSet::new();
    for b in &m.bindings {
        let operands = [
            (Some(&b.q), TensorRole::Q),
            (Some(&b.k), TensorRole::K),
            (Some(&b.v), TensorRole::V),
            (b.bias.as_ref(), TensorRole::Bias),
            (b.mask.as_ref(), TensorRole::Mask),
        ];
        for (id, role) in operands {
            let Some(id) = id else { continue };
            if !seen.insert(id.clone()) {
                continue;
            }
            let desc = TensorDesc::new(id.clone(), &g.tensor(id).expect("matched operand exists").dims, role);
            let mut granules = granules_for(&desc, gran);
            if role == TensorRole::K && !b.k_needs_transpose && granules.len() >= 2 {
                let n = granules.len();
                granules.swap(n - 2, n - 1);
            }
            let pad = plan_padding_with_granules(&desc, &granules, cfg, g.producer(id).is_some())
                .map_err(|e| CliError::invalid(&context, e))?;
            if !pad.is_noop() {
                pads.push(pad);
            }
        }
    }
    plan.padding_plan = (!pads.is_empty()).then_some(pads);
    Ok(plan)
}

fn execute_block(plan: &FoldingPlan, profile: &HwProfile, seed: u64) -> Result<Execution, CliError> {
    let cfg = &profile.npu;
    let context = "block execution";
    let inputs = AttentionInputs::random(&plan.shape, seed);
    let hash = sha256_hex(&inputs.canonical_bytes());
    let reference = reference_attention(&inputs).map_err(|e| CliError::invalid(context, e))?;
    let (unfolded, _) = execute_unfolded(plan, &inputs, cfg).map_err(|e| CliError::invalid(context, e))?;
    let folded = if plan.is_folded() {
        let (z, _) = execute_folded(plan, &inputs, cfg).map_err(|e| CliError::invalid(context, e))?;
        crop_output(&z, plan).map_err(|e| CliError::invalid(context, e))?
    } else {
        unfolded.clone()
    };
    Ok(Execution {
        input_seed: seed,
        folded: SubRun { input_sha256: hash.clone(), max_abs_err_vs_reference: folded.max_abs_diff(&reference) },
        unfolded: SubRun { input_sha256: hash, max_abs_err_vs_reference: unfolded.max_abs_diff(&reference) },
        max_abs_folded_vs_unfolded: folded.max_abs_diff(&unfolded),
    })
}

/// Random values for every graph input; mask operands get 0 / -1e4 entries.
fn graph_feeds(g: &Graph, masks: &BTreeSet<String>, seed: u64) -> BTreeMap<String, Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph_inputs(g)
        .into_iter()
        .map(|t| {
            let value = if t.role == TensorRole::Mask || masks.contains(&t.id) {
                Tensor::from_fn(&t.dims, |i| if i[i.len() - 1] > 0 && rng.gen_bool(0.25) { -1e4 } else { 0.0 })
            } else {
                Tensor::random(&t.dims, &mut rng, 1.0)
            };
            (t.id.clone(), value)
        })
        .collect()
}

/// Run the whole pipeline on one graph document.
pub fn analyze_graph(text: &str, origin: &str, req: &RunRequest, profile: &HwProfile) -> Result<Report, CliError> {
    let g = parse_graph(text).map_err(|e| CliError::graph(origin, e))?;
    let (cfg, gran) = (&profile.npu, &profile.granularity);
    let matches = batch_heads(&g, &match_attention(&g));
    let seed = req.seed.unwrap_or(0);

    let mut blocks = Vec::with_capacity(matches.len());
    let mut folded_graph = g.clone();
    for (index, m) in matches.iter().enumerate() {
        let plan = plan_block(&g, m, profile, req.mode)?;
        let Comparison { folded, unfolded, speedup, .. } =
            compare_costs(&plan, cfg, gran).map_err(|e| CliError::invalid("cost model", e))?;
        if plan.is_folded() {
            let current = batch_heads(&folded_graph, &match_attention(&folded_graph));
            let qk = &m.bindings[0].qk_node;
            let same = current
                .iter()
                .find(|c| &c.bindings[0].qk_node == qk)
                .ok_or_else(|| CliError::invalid(origin, format!("block at `{qk}` vanished while folding")))?;
            folded_graph = fold_attention(&folded_graph, same, &plan).map_err(|e| CliError::graph(origin, e))?;
        }
        let execution = match req.mode {
            Mode::Compare | Mode::Verify => Some(execute_block(&plan, profile, seed.wrapping_add(index as u64))?),
            Mode::Fold | Mode::Unfold => None,
        };
        blocks.push(BlockReport {
            index,
            summary: summarize(m),
            utilization: folded.utilization,
            plan,
            folded,
            unfolded,
            speedup,
            execution,
        });
    }

    let verify = (req.mode == Mode::Verify).then(|| -> Result<VerifySummary, CliError> {
        let masks: BTreeSet<String> = matches.iter().flat_map(|m| m.bindings.iter().filter_map(|b| b.mask.clone())).collect();
        let feeds = graph_feeds(&g, &masks, seed);
        let want = evaluate(&g, &feeds, cfg).map_err(|e| CliError::graph(origin, e))?;
        let got = evaluate(&folded_graph, &feeds, cfg).map_err(|e| CliError::graph(origin, e))?;
        let graph_outputs: Vec<GraphCheck> = graph_outputs(&g)
            .into_iter()
            .map(|t| GraphCheck { tensor: t.id.clone(), max_abs_err: want[&t.id].max_abs_diff(&got[&t.id]) })
            .collect();
        let block_errs = blocks.iter().filter_map(|b| b.execution.as_ref()).flat_map(|e| {
            [e.folded.max_abs_err_vs_reference, e.unfolded.max_abs_err_vs_reference]
        });
        let max_abs_err = graph_outputs.iter().map(|c| c.max_abs_err).chain(block_errs).fold(0.0, f64::max);
        Ok(VerifySummary { tolerance: req.tolerance, max_abs_err, graph_outputs, passed: max_abs_err < req.tolerance })
    });
    let verify = verify.transpose()?;

    let total_folded_latency: f64 = blocks.iter().map(|b| b.folded.latency).sum();
    let total_unfolded_latency: f64 = blocks.iter().map(|b| b.unfolded.latency).sum();
    Ok(Report {
        tool: "attnfold",
        version: env!("CARGO_PKG_VERSION"),
        mode: req.mode,
        seed: req.seed,
        overrides: req.overrides.clone(),
        graph_sha256: sha256_hex(text.as_bytes()),
        config: *profile,
        total_speedup: if total_folded_latency > 0.0 { total_unfolded_latency / total_folded_latency } else { 1.0 },
        total_folded_latency,
        total_unfolded_latency,
        folded_graph: (req.mode == Mode::Fold)
            .then(|| serde_json::from_str(&folded_graph.to_json()).expect("graph serializes to JSON")),
        blocks,
        verify,
    })
}

impl Report {
    /// Plain-text table, one line per block.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5} {:>8} {:>6} {:>6} {:>6} {:>5} {:>12} {:>12} {:>8} {:>13}",
            "block", "variant", "heads", "lq", "lk", "level", "folded_s", "unfolded_s", "speedup", "unfolded_bound"
        );
        for b in &self.blocks {
            let _ = writeln!(
                out,
                "{:>5} {:>8} {:>6} {:>6} {:>6} {:>5} {:>12.4e} {:>12.4e} {:>8.3} {:>13}",
                b.index,
                format!("{:?}", b.summary.variant),
                b.summary.num_q_heads,
                b.summary.lq,
                b.summary.lk,
                b.plan.folding_level.as_u8(),
                b.folded.latency,
                b.unfolded.latency,
                b.speedup,
                format!("{:?}", b.unfolded.bound),
            );
        }
        if let Some(v) = &self.verify {
            let _ = writeln!(out, "verify: max_abs_err={:.3e} tolerance={:e} {}", v.max_abs_err, v.tolerance, if v.passed { "PASS" } else { "FAIL" });
        }
        out
    }
}
