//! Distills the sequence task's RLHF teacher into a few-step student, then
//! into a block-causal student, and prints per-frame error growth.
//!
//!     cargo run --release --example causal_distill -- [out_dir]
//!
//! Earlier stages found in `out_dir` are reused. Expect a few minutes.

use std::path::PathBuf;

use anyhow::Result;
use flowpost::pipeline::{model_path, run_stage, stage_dir, ExperimentConfig, Stage};

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let mut cfg = ExperimentConfig::for_task("sequence")?;
    cfg.out = std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/causal_distill"), PathBuf::from);

    for stage in [Stage::Pretrain, Stage::Sft, Stage::Rlhf] {
        if !model_path(&cfg, stage).exists() {
            run_stage(stage, &cfg)?;
        }
    }
    let rep = run_stage(Stage::Distill, &cfg)?;
    for (k, v) in &rep.summary {
        println!("{k} = {v:.4}");
    }

    // one row per model: growth slope, then mean error per frame
    let table = std::fs::read_to_string(stage_dir(&cfg, Stage::Distill).join("exposure.csv"))?;
    println!("\n{:<12} {:>8}  per-frame error", "model", "slope");
    for line in table.lines().skip(1) {
        let mut cols = line.split(',');
        let name = cols.next().unwrap_or_default();
        let slope: f64 = cols.next().unwrap_or("nan").parse()?;
        let frames: Vec<String> = cols.map(|v| v.parse::<f64>().map(|v| format!("{v:.3}"))).collect::<Result<_, _>>()?;
        println!("{name:<12} {slope:>8.4}  {}", frames.join(" "));
    }
    Ok(())
}
