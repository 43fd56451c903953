//! Runs the whole offline and deployment flow into a directory, as the
//! `pmpd pipeline` command does.
//!
//! `cargo run --release --example pipeline -- out/demo`

use std::path::PathBuf;

use pmpd::cli::{cmd_pipeline, EvalReport, RunConfig, TracesReport};

fn main() -> anyhow::Result<()> {
    let out_dir = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("pmpd-demo"), PathBuf::from);
    let cfg = RunConfig { out_dir: out_dir.clone(), seed: 42, horizon: 16, ..RunConfig::default() };
    cmd_pipeline(&cfg)?;

    let read = |name: &str| -> anyhow::Result<serde_json::Value> {
        Ok(serde_json::from_str(&std::fs::read_to_string(out_dir.join(name))?)?)
    };
    let eval: EvalReport = serde_json::from_value(read("eval_static.json")?["payload"].clone())?;
    let traces: TracesReport = serde_json::from_value(read("traces_static.json")?["payload"].clone())?;
    println!("artifacts in {}", out_dir.display());
    println!("{}: mean F1 {:.3} at {:.2} bits", traces.scheduler, eval.mean_f1, eval.candidate_avg_bitwidth);
    Ok(())
}
