use std::fmt::Write as _;

use attnfold::hw::HwProfile;
use attnfold::parallel::{self, ExecMode};
use attnfold::sim::{compare_costs, Bound};
use attnfold::tiler::{select_tiling, AttentionShape, SpatialMode};
use serde::Serialize;

use crate::CliError;

/// Cartesian grid of attention shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepSpec {
    pub lq: Vec<usize>,
    pub lk: Vec<usize>,
    pub d: Vec<usize>,
    pub heads: Vec<usize>,
}

impl SweepSpec {
    /// Points in order heads, d, lq, lk (lk varies fastest).
    pub fn points(&self) -> Vec<AttentionShape> {
        let mut out = Vec::new();
        for &h in &self.heads {
            for &d in &self.d {
                for &lq in &self.lq {
                    for &lk in &self.lk {
                        out.push(AttentionShape::new(h, lq, lk, d));
                    }
                }
            }
        }
        out
    }
}

/// Parse one axis: `N`, `a|b|c`, `lo..hi` (doubling) or `lo..hi/step` (arithmetic).
fn parse_axis(key: &str, text: &str) -> Result<Vec<usize>, CliError> {
    let num = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("--sweep {key}: `{s}` is not a non-negative integer")))
    };
    let values = if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = match rest.split_once('/') {
            Some((hi, step)) => (num(hi)?, Some(num(step)?)),
            None => (num(rest)?, None),
        };
        let lo = num(lo)?;
        let mut v = Vec::new();
        let mut x = lo;
        match step {
            Some(0) => return Err(CliError::Usage(format!("--sweep {key}: step must be >= 1"))),
            Some(step) => {
                while x <= hi {
                    v.push(x);
                    x += step;
                }
            }
            None => {
                if lo == 0 {
                    return Err(CliError::Usage(format!("--sweep {key}: a doubling range cannot start at 0")));
                }
                while x <= hi {
                    v.push(x);
                    x *= 2;
                }
            }
        }
        v
    } else {
        text.split('|').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if values.is_empty() {
        return Err(CliError::Usage(format!("--sweep {key}: range `{text}` is empty")));
    }
    Ok(values)
}

/// `lq=..,lk=..,d=..,heads=..`; `d` defaults to 64 and `heads` to 1.
pub fn parse_sweep(text: &str) -> Result<SweepSpec, CliError> {
    let (mut lq, mut lk, mut d, mut heads) = (None, None, None, None);
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--sweep: `{part}` is not key=range")))?;
        let key = key.trim();
        let slot = match key {
            "lq" => &mut lq,
            "lk" => &mut lk,
            "d" => &mut d,
            "heads" => &mut heads,
            other => return Err(CliError::Usage(format!("--sweep: unknown axis `{other}` (expected lq, lk, d, heads)"))),
        };
        if slot.is_some() {
            return Err(CliError::Usage(format!("--sweep: axis `{key}` given twice")));
        }
        *slot = Some(parse_axis(key, value.trim())?);
    }
    let require = |v: Option<Vec<usize>>, key: &str| v.ok_or_else(|| CliError::Usage(format!("--sweep: missing axis `{key}`")));
    Ok(SweepSpec {
        lq: require(lq, "lq")?,
        lk: require(lk, "lk")?,
        d: d.unwrap_or_else(|| vec![64]),
        heads: heads.unwrap_or_else(|| vec![1]),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub lq: usize,
    pub lk: usize,
    pub d: usize,
    pub heads: usize,
    pub folding_level: u8,
    pub strategy: Option<SpatialMode>,
    pub utilization: f64,
    pub folded_latency: f64,
    pub unfolded_latency: f64,
    pub folded_dram_bytes: u64,
    pub unfolded_dram_bytes: u64,
    pub folded_bound: Bound,
    pub unfolded_bound: Bound,
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub tool: &'static str,
    pub version: &'static str,
    pub spec: SweepSpec,
    pub config: HwProfile,
    pub rows: Vec<SweepRow>,
}

/// Cost-model comparison at every point of the grid. Points are evaluated in
/// parallel and assembled in grid order.
pub fn emit_shape_sweep(spec: &SweepSpec, profile: &HwProfile) -> Result<SweepReport, CliError> {
    let points = spec.points();
    if points.is_empty() {
        return Err(CliError::Usage("--sweep: empty range".into()));
    }
    let (cfg, gran) = (&profile.npu, &profile.granularity);
    let rows = parallel::map(ExecMode::default(), &points, |s| -> Result<SweepRow, CliError> {
        let at = format!("sweep point lq={} lk={} d={} heads={}", s.lq, s.lk, s.d, s.heads);
        let plan = select_tiling(s, gran, cfg).map_err(|e| CliError::invalid(&at, e))?;
        let c = compare_costs(&plan, cfg, gran).map_err(|e| CliError::invalid(&at, e))?;
        Ok(SweepRow {
            lq: s.lq,
            lk: s.lk,
            d: s.d,
            heads: s.heads,
            folding_level: c.folding_level,
            strategy: plan.strategy.map(|st| st.mode),
            utilization: c.folded.utilization,
            folded_latency: c.folded.latency,
            unfolded_latency: c.unfolded.latency,
            folded_dram_bytes: c.folded.dram_bytes,
            unfolded_dram_bytes: c.unfolded.dram_bytes,
            folded_bound: c.folded.bound,
            unfolded_bound: c.unfolded.bound,
            speedup: c.speedup,
        })
    });
    Ok(SweepReport {
        tool: "attnfold",
        version: env!("CARGO_PKG_VERSION"),
        spec: spec.clone(),
        config: *profile,
        rows: rows.into_iter().collect::<Result<_, _>>()?,
    })
}

impl SweepReport {
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>6} {:>6} {:>5} {:>5} {:>5} {:>12} {:>12} {:>8}", "heads", "lq", "lk", "d", "level", "folded_s", "unfolded_s", "speedup");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>6} {:>6} {:>5} {:>5} {:>5} {:>12.4e} {:>12.4e} {:>8.3}",
                r.heads, r.lq, r.lk, r.d, r.folding_level, r.folded_latency, r.unfolded_latency, r.speedup
            );
        }
        out
    }
}
