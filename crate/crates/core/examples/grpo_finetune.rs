//! Pretrains, fine-tunes and then runs flow GRPO on the 2-D point task, and
//! compares the RLHF generator against its SFT starting point.
//!
//!     cargo run --release --example grpo_finetune -- [out_dir] [iterations]

use std::path::PathBuf;

use anyhow::{Context, Result};
use flowpost::pipeline::{evaluate_named, run_stage, ExperimentConfig, Stage};

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::for_task("point")?;
    cfg.out = args.next().map_or_else(|| PathBuf::from("runs/grpo_finetune"), PathBuf::from);
    if let Some(n) = args.next() {
        cfg.rlhf.iterations = n.parse().context("iterations must be an integer")?;
    }

    for stage in [Stage::Pretrain, Stage::Sft, Stage::Rlhf] {
        let rep = run_stage(stage, &cfg)?;
        println!("{} -> {}", stage.name(), rep.checkpoint.display());
        for (k, v) in &rep.summary {
            println!("  {k} = {v:.4}");
        }
    }
    let (rep, path) = evaluate_named(&cfg, "rlhf", "sft", cfg.eval.delta)?;
    print!("{}", rep.summary());
    println!("report written to {}", path.display());
    Ok(())
}
