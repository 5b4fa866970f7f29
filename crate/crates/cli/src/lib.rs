//! Library side of the `attnfold` command: request handling, the per-block
//! pipeline (match, batch, tile, transform plans, fold, simulate) and the
//! JSON reports it produces.

mod report;
mod sweep;

use std::fs;
use std::path::PathBuf;

use attnfold::error::{GraphError, HwError};
use attnfold::hw::HwProfile;

pub use report::{analyze_graph, BlockReport, Execution, GraphCheck, MatchSummary, Report, SubRun, VerifySummary};
pub use sweep::{emit_shape_sweep, parse_sweep, SweepReport, SweepRow, SweepSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Fold every block that fits; report plans, costs and the rewritten graph.
    Fold,
    /// Keep every block unfolded (level 1 baseline mapping).
    Unfold,
    /// Fold, then run both mappings on one seeded input set.
    Compare,
    /// Compare plus oracle checks; exits 3 when an error exceeds the tolerance.
    Verify,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub graph_path: Option<PathBuf>,
    /// Hardware profile JSON; the built-in XDNA2 profile when absent.
    pub config_path: Option<PathBuf>,
    pub mode: Mode,
    pub seed: Option<u64>,
    pub out_path: Option<PathBuf>,
    /// `key=value` config overrides, applied in order after the config file.
    pub overrides: Vec<String>,
    /// Shape sweep grid; replaces the graph pipeline when set.
    pub sweep: Option<String>,
    pub tolerance: f64,
}

impl RunRequest {
    pub fn new(mode: Mode) -> Self {
        Self {
            graph_path: None,
            config_path: None,
            mode,
            seed: None,
            out_path: None,
            overrides: Vec::new(),
            sweep: None,
            tolerance: attnfold::sim::TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ExitStatus {
    Ok = 0,
    Usage = 1,
    Validation = 2,
    ToleranceBreach = 3,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Validation(String),
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Usage(_) | CliError::Parse(_) => ExitStatus::Usage,
            CliError::Validation(_) => ExitStatus::Validation,
        }
    }

    pub(crate) fn graph(path: &str, e: GraphError) -> Self {
        if e.is_validation() {
            CliError::Validation(format!("graph {path}: {e}"))
        } else {
            CliError::Parse(format!("graph {path}: {e}"))
        }
    }

    pub(crate) fn hw(origin: &str, e: HwError) -> Self {
        match e {
            HwError::Parse(_) => CliError::Parse(format!("{origin}: {e}")),
            HwError::BadOverride(_) => CliError::Usage(format!("{origin}: {e}")),
            _ => CliError::Validation(format!("{origin}: {e}")),
        }
    }

    pub(crate) fn invalid(context: &str, e: impl std::fmt::Display) -> Self {
        CliError::Validation(format!("{context}: {e}"))
    }
}

/// Result of a completed run. The report has already been written when the
/// request named an output path.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: String,
    pub summary: String,
    pub status: ExitStatus,
}

fn read(path: &PathBuf, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {what} {}: {e}", path.display())))
}

/// Config file (or the default profile) with overrides applied and validated.
pub fn load_profile(req: &RunRequest) -> Result<HwProfile, CliError> {
    let mut profile = match &req.config_path {
        Some(p) => {
            let text = read(p, "config")?;
            let profile: HwProfile = serde_json::from_str(&text)
                .map_err(|e| CliError::Parse(format!("config {}: {e}", p.display())))?;
            profile
        }
        None => HwProfile::default(),
    };
    for o in &req.overrides {
        profile.apply_override(o).map_err(|e| CliError::hw("--set", e))?;
    }
    profile.validate().map_err(|e| CliError::hw("config", e))?;
    Ok(profile)
}

/// Execute one request and write its report.
pub fn run(req: &RunRequest) -> Result<RunOutcome, CliError> {
    if req.tolerance.is_nan() || req.tolerance < 0.0 {
        return Err(CliError::Usage(format!("tolerance must be >= 0, got {}", req.tolerance)));
    }
    let profile = load_profile(req)?;
    let (report, summary, status) = match (&req.sweep, &req.graph_path) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--sweep and --graph are mutually exclusive".into())),
        (None, None) => return Err(CliError::Usage("one of --graph or --sweep is required".into())),
        (Some(spec), None) => {
            let spec = parse_sweep(spec)?;
            let sweep = emit_shape_sweep(&spec, &profile)?;
            (to_json(&sweep), sweep.summary_table(), ExitStatus::Ok)
        }
        (None, Some(path)) => {
            if req.mode == Mode::Verify && req.seed.is_none() {
                return Err(CliError::Usage("--mode verify requires --seed".into()));
            }
            let text = read(path, "graph")?;
            let r = analyze_graph(&text, &path.display().to_string(), req, &profile)?;
            let status = match &r.verify {
                Some(v) if !v.passed => ExitStatus::ToleranceBreach,
                _ => ExitStatus::Ok,
            };
            (to_json(&r), r.summary_table(), status)
        }
    };
    if let Some(out) = &req.out_path {
        fs::write(out, &report).map_err(|e| CliError::Usage(format!("cannot write report {}: {e}", out.display())))?;
    }
    Ok(RunOutcome { report, summary, status })
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}
