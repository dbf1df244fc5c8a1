//! Trains a prompt enhancer on top of an RLHF generator and shows the
//! rewrites it prefers for each prompt.
//!
//!     cargo run --release --example prompt_enhancer -- [out_dir]
//!
//! Earlier stages found in `out_dir` are reused.

use std::path::PathBuf;

use anyhow::{bail, Result};
use diffcore::RngStream;
use flowpost::pipeline::{evaluate_named, model_path, run_stage, ExperimentConfig, Model, Stage};
use flowpost::promptenh::sample_enhanced;

fn main() -> Result<()> {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let mut cfg = ExperimentConfig::for_task("point")?;
    cfg.out = std::env::args().nth(1).map_or_else(|| PathBuf::from("runs/prompt_enhancer"), PathBuf::from);

    for stage in [Stage::Pretrain, Stage::Sft, Stage::Rlhf] {
        if !model_path(&cfg, stage).exists() {
            run_stage(stage, &cfg)?;
        }
    }
    let rep = run_stage(Stage::Pe, &cfg)?;
    for (k, v) in &rep.summary {
        println!("{k} = {v:.4}");
    }

    let Model::Enhanced { policy, vocab, .. } = Model::load(&cfg, "pe")?.1 else {
        bail!("the pe stage did not produce an enhancer");
    };
    let mut rng = RngStream::derive(cfg.seed, "pe-example", 0, 0);
    for &p in &cfg.pe.train.prompts {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for _ in 0..200 {
            let s = sample_enhanced(&policy, &vocab, p, &mut rng)?;
            let text = vocab.render(&s.tokens);
            match counts.iter_mut().find(|(t, _)| *t == text) {
                Some((_, c)) => *c += 1,
                None => counts.push((text, 1)),
            }
        }
        counts.sort_by_key(|c| std::cmp::Reverse(c.1));
        println!("prompt {p}:");
        for (text, c) in counts.iter().take(3) {
            println!("  {:>5.1}%  {text}", 100.0 * *c as f64 / 200.0);
        }
    }
    let (eval, _) = evaluate_named(&cfg, "pe", "rlhf", cfg.eval.delta)?;
    print!("{}", eval.summary());
    Ok(())
}
