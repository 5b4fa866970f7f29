use std::path::PathBuf;
use std::process::ExitCode;

use attnfold_cli::{run, ExitStatus, Mode, RunRequest};
use clap::Parser;

/// Fold attention blocks of an operator graph for a modeled NPU and compare
/// folded against unfolded dataflow.
#[derive(Debug, Parser)]
#[command(name = "attnfold", version)]
struct Args {
    /// Graph JSON document.
    #[arg(long, conflicts_with = "sweep")]
    graph: Option<PathBuf>,
    /// Hardware profile JSON (`{"npu": {..}, "granularity": {..}}`); XDNA2 defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Compare)]
    mode: Mode,
    /// Seed for generated input tensors (required by verify).
    #[arg(long)]
    seed: Option<u64>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override, e.g. `--set l1_bytes=32768` or `--set gran.block=16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shape sweep, e.g. `lq=1024,lk=64..4096,d=64,heads=12`.
    #[arg(long)]
    sweep: Option<String>,
    /// Max-abs error allowed in verify mode.
    #[arg(long, default_value_t = attnfold::sim::TOLERANCE)]
    tolerance: f64,
    /// Print a plain-text summary table to stderr.
    #[arg(long)]
    summary: bool,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { ExitStatus::Usage as u8 } else { 0 });
        }
    };
    let req = RunRequest {
        graph_path: args.graph,
        config_path: args.config,
        mode: args.mode,
        seed: args.seed,
        out_path: args.out.clone(),
        overrides: args.overrides,
        sweep: args.sweep,
        tolerance: args.tolerance,
    };
    match run(&req) {
        Ok(outcome) => {
            if args.out.is_none() {
                print!("{}", outcome.report);
            }
            if args.summary {
                eprint!("{}", outcome.summary);
            }
            if outcome.status == ExitStatus::ToleranceBreach {
                eprintln!("error: verify tolerance exceeded (see report `verify` section)");
            }
            ExitCode::from(outcome.status as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.status() as u8)
        }
    }
}
