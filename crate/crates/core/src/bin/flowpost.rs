use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use flowpost::pipeline::{self, ExperimentConfig, Stage};

/// Post-training lab for small conditional flow generators.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Task for the built-in defaults when no config file is given.
    #[arg(long, default_value = "point")]
    task: String,
    /// Reward weights as alignment,video,image,motion.
    #[arg(long)]
    weights: Option<String>,
    /// Any other key, e.g. `--set rlhf.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args, Clone)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Training steps or iterations for this stage.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    beta_kl: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    Pretrain(StageArgs),
    Sft(StageArgs),
    Rlhf(StageArgs),
    Pe(StageArgs),
    Distill(StageArgs),
    /// Good/Same/Bad comparison of two models (stage names or checkpoint paths).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Render a metrics CSV as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        svg: PathBuf,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::for_task(&c.task)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(w) = &c.weights {
        cfg.rewards.weights = pipeline::config::parse_weights(w)?;
    }
    for kv in &c.sets {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn stage_overrides(stage: Stage, a: &StageArgs, cfg: &mut ExperimentConfig) -> Result<()> {
    let sec = stage.name();
    if let Some(n) = a.iters {
        let n = n.to_string();
        match stage {
            Stage::Pretrain | Stage::Sft => cfg.set(&format!("{sec}.steps"), &n)?,
            Stage::Rlhf | Stage::Pe => cfg.set(&format!("{sec}.iterations"), &n)?,
            Stage::Distill => {
                cfg.set("distill.dmd_iterations", &n)?;
                cfg.set("distill.sf_iterations", &n)?;
            }
        }
    }
    let only_grpo = |flag: &str| -> Result<()> {
        if matches!(stage, Stage::Rlhf | Stage::Pe) {
            Ok(())
        } else {
            bail!("{flag} applies to rlhf and pe only")
        }
    };
    if let Some(g) = a.group_size {
        only_grpo("--group-size")?;
        cfg.set(&format!("{sec}.group_size"), &g.to_string())?;
    }
    if let Some(c) = a.clip {
        only_grpo("--clip")?;
        cfg.set(&format!("{sec}.clip"), &c.to_string())?;
    }
    if let Some(b) = a.beta_kl {
        if stage != Stage::Pe {
            bail!("--beta-kl applies to pe only");
        }
        cfg.pe.train.beta_kl = b;
    }
    cfg.validate()?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Pretrain(a) => (Stage::Pretrain, a),
        Command::Sft(a) => (Stage::Sft, a),
        Command::Rlhf(a) => (Stage::Rlhf, a),
        Command::Pe(a) => (Stage::Pe, a),
        Command::Distill(a) => (Stage::Distill, a),
        Command::Eval { common, a, b, delta } => {
            let cfg = load(&common)?;
            let (rep, path) = pipeline::evaluate_named(&cfg, &a, &b, delta.unwrap_or(cfg.eval.delta))?;
            print!("{}", rep.summary());
            println!("report: {}", path.display());
            return Ok(());
        }
        Command::Plot { metrics, svg } => {
            pipeline::plot(&metrics, &svg)?;
            println!("wrote {}", svg.display());
            return Ok(());
        }
    };
    let mut cfg = load(&args.common)?;
    stage_overrides(stage, &args, &mut cfg)?;
    let rep = pipeline::run_stage(stage, &cfg)?;
    println!("{}: {}", stage.name(), rep.checkpoint.display());
    for (k, v) in &rep.summary {
        println!("  {k} = {v:.4}");
    }
    Ok(())
}
