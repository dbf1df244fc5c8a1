//! Runs every stage for one task, compares each post-trained model with the
//! one before it and plots the RLHF curves.
//!
//!     cargo run --release --example full_pipeline -- [task|config_file] [out_dir]

use std::path::{Path, PathBuf};

use anyhow::Result;
use flowpost::pipeline::{evaluate_named, plot, run_all, stage_dir, ExperimentConfig, Stage};

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let mut args = std::env::args().skip(1);
    let spec = args.next().unwrap_or_else(|| "point".into());
    let mut cfg = if Path::new(&spec).is_file() {
        ExperimentConfig::from_file(Path::new(&spec))?
    } else {
        ExperimentConfig::for_task(&spec)?
    };
    if let Some(out) = args.next() {
        cfg.out = PathBuf::from(out);
    }
    println!("config hash {}", cfg.hash());

    for rep in run_all(&cfg)? {
        println!("{:<9} {}", rep.stage.name(), rep.checkpoint.display());
    }
    for (a, b) in [("sft", "pretrain"), ("rlhf", "sft"), ("pe", "rlhf"), ("distill", "rlhf")] {
        let (rep, _) = evaluate_named(&cfg, a, b, cfg.eval.delta)?;
        print!("\n{}", rep.summary());
    }
    let svg = cfg.out.join("rlhf.svg");
    plot(&stage_dir(&cfg, Stage::Rlhf).join("metrics.csv"), &svg)?;
    println!("\nplot written to {}", svg.display());
    Ok(())
}
