//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line straight to
//! stderr (uncaptured) and then asserts.

use std::io::Write as _;
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use attnfold::hw::{default_xdna2_config, KernelGranularity, NpuConfig};
use attnfold::sim::{
    account_traffic, build_folded_schedule, build_unfolded_schedule, compare_costs, crop_output, execute_folded,
    padded_key_mass, reference_attention, AttentionInputs, Bound,
};
use attnfold::tiler::{plan_at_level, select_tiling, AttentionShape, FoldingLevel, Sharing, SpatialMode};
use attnfold::transforms::{block_transpose, intra_block_transpose};
use attnfold::Tensor;
use attnfold_cli::{run, Mode, RunRequest};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: &str, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[{tag}] {id} {name}: {detail}");
}

fn gran() -> KernelGranularity {
    KernelGranularity::default()
}

#[test]
fn c1_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut n, mut worst) = (0usize, 0.0f64);
    let mut seen = [0usize; 8]; // L2, L3, pinned, split, bias, mask, padded, unpadded
    let mut attempts = 0;
    while n < 240 || seen.iter().any(|&c| c < 10) {
        attempts += 1;
        assert!(attempts < 20_000, "could not cover all instance classes: {seen:?} after {n} instances");
        let kv = rng.gen_range(1..=2);
        let aligned = rng.gen_bool(0.4);
        let mut dim = |max: usize| if aligned { 8 * rng.gen_range(1..=max / 8) } else { rng.gen_range(1..=max) };
        let (lq, lk, d, dv) = (dim(48), dim(72), dim(24), dim(24));
        let mut shape = AttentionShape::new(kv * rng.gen_range(1..=2), lq, lk, d).with_kv_heads(kv).with_dv(dv);
        let pick = |rng: &mut ChaCha8Rng| match rng.gen_range(0..3) {
            0 => None,
            1 => Some(Sharing::Shared),
            _ => Some(Sharing::PerHead),
        };
        shape.bias = pick(&mut rng);
        shape.mask = pick(&mut rng);
        shape.k_transpose = rng.gen_bool(0.3);
        let cfg = NpuConfig { l1_bytes: [2048, 3072, 4096, 8192, 65536][rng.gen_range(0..5)], ..default_xdna2_config() };
        let level = if rng.gen_bool(0.5) { FoldingLevel::Full } else { FoldingLevel::SoftmaxFolded };
        let Some(plan) = plan_at_level(&shape, &gran(), &cfg, level).unwrap() else { continue };
        let inputs = AttentionInputs::random(&shape, rng.gen());
        let (z, _) = execute_folded(&plan, &inputs, &cfg).unwrap();
        let err = crop_output(&z, &plan).unwrap().max_abs_diff(&reference_attention(&inputs).unwrap());
        worst = worst.max(err);
        let padded = plan.padded != shape;
        let split = plan.strategy.unwrap().mode == SpatialMode::KvSplit;
        for (i, hit) in [level == FoldingLevel::SoftmaxFolded, level == FoldingLevel::Full, !split, split, shape.bias.is_some(), shape.mask.is_some(), padded, !padded]
            .into_iter()
            .enumerate()
        {
            seen[i] += usize::from(hit);
        }
        n += 1;
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-9 && n >= 200 && elapsed < Duration::from_secs(120);
    verdict(
        "C1",
        "oracle equivalence",
        ok,
        &format!("{n} instances, max-abs err {worst:.2e}, coverage [L2,L3,pinned,split,bias,mask,padded,unpadded]={seen:?}, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn c2_transpose_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let blk = gran().block;
    let mut bad = 0;
    for _ in 0..50 {
        let (r, c) = (8 * rng.gen_range(1..=32), 8 * rng.gen_range(1..=32));
        let x = Tensor::from_fn(&[r, c], |_| rng.gen_range(-1000..1000) as f64);
        let moved = block_transpose(&x, blk).unwrap();
        let mut out = moved.clone();
        for bi in 0..c / blk {
            for bj in 0..r / blk {
                let tile = Tensor::from_fn(&[blk, blk], |i| moved.get(&[bi * blk + i[0], bj * blk + i[1]]));
                let t = intra_block_transpose(&tile, blk).unwrap();
                for i in 0..blk {
                    for j in 0..blk {
                        out.set(&[bi * blk + i, bj * blk + j], t.get(&[i, j]));
                    }
                }
            }
        }
        let dense = Tensor::from_fn(&[c, r], |i| x.get(&[i[1], i[0]]));
        bad += usize::from(out != dense);
    }
    let elapsed = start.elapsed();
    let ok = bad == 0 && elapsed < Duration::from_secs(10);
    verdict("C2", "transpose correctness", ok, &format!("50 shapes, {bad} mismatches, {elapsed:.1?}"));
    assert!(ok);
}

/// Footprint in bytes from first principles: operand tiles, stream buffers
/// on whichever side is streamed, score tile, output tile and row stats.
fn footprint(sq: usize, sk: usize, p: &AttentionShape, level: u8, extras: usize, cfg: &NpuConfig) -> u64 {
    let buf = gran().stream_buffers as usize;
    let resident = sk == p.lk;
    let (qb, kvb) = if resident { (buf, 1) } else { (1, buf) };
    let mut e = sq * p.d * qb + sk * p.d * kvb + sq * sk + extras * sq * sk * buf + 2 * sq;
    if level == 3 {
        e += sk * p.dv * kvb + sq * p.dv;
    }
    (e as u64) * u64::from(cfg.elem_bytes)
}

#[test]
fn c3_tiler_optimal_prefix() {
    let start = Instant::now();
    let g = gran();
    let (mut checked, mut mismatches, mut overfull) = (0, 0, 0);
    for l1_kb in [8u64, 16, 32, 64] {
        let cfg = NpuConfig { l1_bytes: l1_kb * 1024, ..default_xdna2_config() };
        for lq in (8..=128).step_by(8) {
            for lk in (8..=128).step_by(8) {
                for d in [8, 16, 32, 64] {
                    let shape = AttentionShape::new(1, lq, lk, d);
                    let p = shape.padded(&g).unwrap();
                    let plan = select_tiling(&shape, &g, &cfg).unwrap();
                    let mut want = (1u8, None);
                    'levels: for level in [3u8, 2] {
                        let mut best = None;
                        for sq in (8..=p.lq).step_by(8).filter(|s| p.lq.is_multiple_of(*s)) {
                            for sk in (8..=p.lk).step_by(8).filter(|s| p.lk.is_multiple_of(*s)) {
                                if footprint(sq, sk, &p, level, 0, &cfg) <= cfg.l1_bytes {
                                    best = best.max(Some((sq, sk)));
                                }
                            }
                        }
                        if best.is_some() {
                            want = (level, best);
                            break 'levels;
                        }
                    }
                    let got = (plan.folding_level.as_u8(), plan.subvolumes.map(|s| (s.q_rows(), s.k_rows())));
                    mismatches += usize::from(got != want);
                    overfull += usize::from(plan.is_folded() && plan.l1_footprint_bytes > cfg.l1_bytes);
                    checked += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = mismatches == 0 && overfull == 0 && elapsed < Duration::from_secs(60);
    verdict(
        "C3",
        "tiler optimal prefix and feasibility",
        ok,
        &format!("{checked} grid points, {mismatches} mismatches, {overfull} over-L1 plans, {elapsed:.1?}"),
    );
    assert!(ok);
}

#[test]
fn c4_traffic_dominance() {
    let cfg = default_xdna2_config();
    let e = u64::from(cfg.elem_bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut tested, mut violations, mut inexact) = (0, 0, 0);
    for _ in 0..300 {
        let kv = rng.gen_range(1..=4);
        let mut s = AttentionShape::new(kv * rng.gen_range(1..=3), rng.gen_range(1..=512), rng.gen_range(1..=512), rng.gen_range(1..=128))
            .with_kv_heads(kv);
        s.bias = [None, Some(Sharing::Shared), Some(Sharing::PerHead)][rng.gen_range(0..3)];
        s.mask = [None, Some(Sharing::Shared), Some(Sharing::PerHead)][rng.gen_range(0..3)];
        s.k_transpose = rng.gen_bool(0.5);
        let unf = account_traffic(&build_unfolded_schedule(&select_tiling(&s, &gran(), &cfg).unwrap(), &cfg));
        let at = |l| plan_at_level(&s, &gran(), &cfg, l).unwrap().map(|p| account_traffic(&build_folded_schedule(&p, &cfg).unwrap()));
        let (l3, l2) = (at(FoldingLevel::Full), at(FoldingLevel::SoftmaxFolded));
        let Some(l2) = l2 else { continue };
        tested += 1;
        let extra = |x: Option<Sharing>| match x {
            None => 0,
            Some(Sharing::Shared) => s.lq * s.lk,
            Some(Sharing::PerHead) => s.heads * s.lq * s.lk,
        };
        let one_pass = (s.heads * s.lq * s.d + s.kv_heads * s.lk * (s.d + s.dv) + extra(s.bias) + extra(s.mask) + s.heads * s.lq * s.dv) as u64 * e;
        if let Some(l3) = l3 {
            violations += usize::from(!(l3 <= l2 && l2 <= unf));
            inexact += usize::from(l3 != one_pass);
        } else {
            violations += usize::from(l2 > unf);
        }
    }
    let ok = violations == 0 && inexact == 0 && tested >= 100;
    verdict(
        "C4",
        "traffic dominance",
        ok,
        &format!("{tested} shapes, {violations} ordering violations, {inexact} level-3 totals off the one-pass byte count"),
    );
    assert!(ok);
}

#[test]
fn c5_trend_reproduction() {
    let cfg = default_xdna2_config();
    let cmp = |s: AttentionShape| compare_costs(&select_tiling(&s, &gran(), &cfg).unwrap(), &cfg, &gran()).unwrap();
    let large = cmp(AttentionShape::new(12, 1024, 1024, 64));
    let small = cmp(AttentionShape::new(1, 64, 64, 64));
    let large_ok = large.speedup >= 2.0;
    let small_ok = (1.0..=1.3).contains(&small.speedup);
    let ordered = large.speedup > small.speedup;
    let flips = large.folded.bound == Bound::MemoryBound && small.folded.bound == Bound::ComputeBound;
    let ok = large_ok && small_ok && ordered && flips;
    verdict(
        "C5",
        "trend reproduction",
        ok,
        &format!(
            "large 12x1024x1024 d64: speedup {:.3} (>= 2: {large_ok}), folded {:?}; small 1x64x64 d64: speedup {:.3} (in [1.0, 1.3]: {small_ok}), folded {:?}; ordering {ordered}, bound flip {flips}",
            large.speedup, large.folded.bound, small.speedup, small.folded.bound
        ),
    );
    assert!(ok);
}

#[test]
fn c6_monotonicity() {
    let mut runner = TestRunner::new(Config { cases: 128, failure_persistence: None, ..Config::default() });
    let levels = runner.run(
        &(1usize..=12, 1usize..=600, 1usize..=600, 1usize..=128, any::<bool>(), 1u64..=64, 1u64..=64),
        |(heads, lq, lk, d, mask, kb, more)| {
            let mut s = AttentionShape::new(heads, lq, lk, d);
            if mask {
                s = s.with_mask(Sharing::PerHead);
            }
            let small = NpuConfig { l1_bytes: kb * 1024, ..default_xdna2_config() };
            let big = NpuConfig { l1_bytes: (kb + more) * 1024, ..default_xdna2_config() };
            let a = select_tiling(&s, &gran(), &small).unwrap().folding_level;
            let b = select_tiling(&s, &gran(), &big).unwrap().folding_level;
            prop_assert!(a <= b, "level {a:?} at {kb}KB > {b:?} at {}KB", kb + more);
            Ok(())
        },
    );
    let mut runner = TestRunner::new(Config { cases: 128, failure_persistence: None, ..Config::default() });
    let cfg = default_xdna2_config();
    let speedups = runner.run(
        &(1usize..=16, prop::sample::select(vec![64usize, 128, 256, 512, 1024]), prop::sample::select(vec![32usize, 64, 128]), 0u8..3),
        |(heads, lq, d, extras)| {
            let mut s = AttentionShape::new(heads, lq, 64, d);
            if extras >= 1 {
                s = s.with_mask(Sharing::Shared);
            }
            if extras == 2 {
                s = s.with_bias(Sharing::PerHead);
            }
            let mut prev: Option<(u8, f64, usize)> = None;
            for lk in [64, 128, 256, 512, 1024, 2048, 4096] {
                let c = compare_costs(&select_tiling(&AttentionShape { lk, ..s }, &gran(), &cfg).unwrap(), &cfg, &gran()).unwrap();
                if let Some((level, sp, plk)) = prev {
                    if level == c.folding_level {
                        prop_assert!(c.speedup >= sp, "speedup fell {sp:.4} -> {:.4} from Lk={plk} to Lk={lk}", c.speedup);
                    }
                }
                prev = Some((c.folding_level, c.speedup, lk));
            }
            Ok(())
        },
    );
    let ok = levels.is_ok() && speedups.is_ok();
    fn show<E: std::fmt::Display>(r: &Result<(), E>) -> String {
        r.as_ref().map_or_else(|e| e.to_string(), |()| "ok".into())
    }
    verdict(
        "C6",
        "monotonicity",
        ok,
        &format!("level vs L1 (128 cases): {}; speedup vs Lk (128 cases x 7 Lk): {}", show(&levels), show(&speedups)),
    );
    assert!(ok);
}

#[test]
fn c7_padding_neutrality() {
    let cfg = default_xdna2_config();
    let shapes = [
        AttentionShape::new(2, 197, 197, 64),
        AttentionShape::new(3, 50, 77, 40).with_mask(Sharing::Shared),
        AttentionShape::new(4, 13, 29, 20).with_kv_heads(2).with_bias(Sharing::PerHead),
        AttentionShape::new(1, 197, 197, 64).with_k_transpose(true),
    ];
    let (mut worst_err, mut worst_mass) = (0.0f64, 0.0f64);
    for (i, s) in shapes.iter().enumerate() {
        let plan = select_tiling(s, &gran(), &cfg).unwrap();
        assert!(plan.padded.lq != s.lq || plan.padded.lk != s.lk || plan.padded.d != s.d);
        let inputs = AttentionInputs::random(s, i as u64);
        let (z, _) = execute_folded(&plan, &inputs, &cfg).unwrap();
        let cropped = crop_output(&z, &plan).unwrap();
        worst_err = worst_err.max(cropped.max_abs_diff(&reference_attention(&inputs).unwrap()));
        worst_mass = worst_mass.max(padded_key_mass(&inputs, plan.padded.lk, plan.padded.d).unwrap());
    }
    let ok = worst_err < 1e-9 && worst_mass < 1e-6;
    verdict(
        "C7",
        "padding neutrality",
        ok,
        &format!("{} ragged shapes (197->200 incl.), max-abs err {worst_err:.2e}, padded-key softmax mass {worst_mass:.2e}", shapes.len()),
    );
    assert!(ok);
}

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("graphs").join(name)
}

#[test]
fn c8_cli_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let graph = shipped("vit_like.json");
    let out = |name: &str| dir.path().join(name);
    let invoke = |dest: &PathBuf| {
        Command::new(env!("CARGO_BIN_EXE_attnfold"))
            .args(["--graph", graph.to_str().unwrap(), "--mode", "compare", "--seed", "5", "--set", "l1_bytes=32768"])
            .args(["--out", dest.to_str().unwrap()])
            .status()
            .unwrap()
    };
    let (a, b) = (out("a.json"), out("b.json"));
    let runs_ok = invoke(&a).success() && invoke(&b).success();
    let identical_bin = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let mut req = RunRequest::new(Mode::Verify);
    req.graph_path = Some(shipped("gqa_decoder.json"));
    req.seed = Some(3);
    let identical_lib = run(&req).unwrap().report == run(&req).unwrap().report;

    let bad = out("bad.json");
    std::fs::write(
        &bad,
        r#"{"tensors": [{"id": "x", "dims": [4, 4]}, {"id": "y", "dims": [4, 4]}],
            "nodes": [{"id": "broken_softmax", "kind": "SoftMax", "inputs": ["x"], "outputs": ["y"], "attrs": {"axis": 5}}]}"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_attnfold")).args(["--graph", bad.to_str().unwrap()]).output().unwrap();
    let stderr = String::from_utf8_lossy(&o.stderr);
    let diagnosed = !o.status.success() && stderr.contains("broken_softmax");

    let ok = runs_ok && identical_bin && identical_lib && diagnosed;
    verdict(
        "C8",
        "CLI determinism",
        ok,
        &format!(
            "binary reports identical: {identical_bin}; library reports identical: {identical_lib}; malformed graph exit {:?}, diagnostic `{}`",
            o.status.code(),
            stderr.trim()
        ),
    );
    assert!(ok);
}
