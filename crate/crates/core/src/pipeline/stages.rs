//! The five training stages and their on-disk artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffcore::{ParamStore, RngStream, Tensor};
use tracing::info;

use crate::ardistill::{
    causality_probe, collect_ode_pairs, frame_errors, growth_slope, stage1_dmd, stage2_causal_regression,
    stage3_self_forcing, MaskMode, StudentConfig, StudentGenerator,
};
use crate::error::{Error, Result};
use crate::flowsde::{sample_paths, Cond, PathSpec, SdeSteps};
use crate::genmodel::{
    fit_flow_matching, model_validity, sample_per_prompt, Dataset, FlowNet, FlowNetConfig, Task, TargetLaw,
};
use crate::grpoflow::rlhf_train;
use crate::pipeline::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::pipeline::config::{ExperimentConfig, RewardSource};
use crate::pipeline::metrics::{MetricsLog, MetricsRow};
use crate::promptenh::{exact_sequence_kl, pe_grpo_train, EnhancerPolicy, ModifierVocab, OutcomeScorer};
use crate::rewards::{
    gsb_compare, make_preferences, reward_components, reward_motion, train_reward_model, NormStats, OracleReward,
    PreferencePair, RewardBundle, RewardNet, RewardWeights, TerminalReward,
};

/// Rows are logged every this many optimizer steps in the supervised stages.
const LOG_EVERY: usize = 50;
const REWARD_HIDDEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Pretrain,
    Sft,
    Rlhf,
    Pe,
    Distill,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Pretrain, Stage::Sft, Stage::Rlhf, Stage::Pe, Stage::Distill];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sft => "sft",
            Stage::Rlhf => "rlhf",
            Stage::Pe => "pe",
            Stage::Distill => "distill",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown stage {s:?}")))
    }

    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Pretrain => None,
            Stage::Sft => Some(Stage::Pretrain),
            Stage::Rlhf => Some(Stage::Sft),
            Stage::Pe | Stage::Distill => Some(Stage::Rlhf),
        }
    }
}

pub fn stage_dir(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    cfg.out.join(stage.name())
}

pub fn model_path(cfg: &ExperimentConfig, stage: Stage) -> PathBuf {
    stage_dir(cfg, stage).join("model.fgpl")
}

fn require(cfg: &ExperimentConfig, stage: Stage) -> Result<PathBuf> {
    let p = model_path(cfg, stage);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingStage(stage.name()))
    }
}

fn header(cfg: &ExperimentConfig, kind: &str, stage: &str, iteration: usize, params: ParamStore) -> Checkpoint {
    Checkpoint::new(params)
        .with("kind", kind)
        .with("stage", stage)
        .with("iteration", iteration)
        .with("config_hash", cfg.hash())
        .with("format_version", FORMAT_VERSION)
        .with("task", &cfg.task)
}

pub fn flownet_checkpoint(cfg: &ExperimentConfig, net: &FlowNet, stage: &str, iteration: usize) -> Checkpoint {
    let c = &net.config;
    header(cfg, "flownet", stage, iteration, net.params.clone())
        .with("state_dim", c.state_dim)
        .with("num_prompts", c.num_prompts)
        .with("num_details", c.num_details)
        .with("width", c.width)
        .with("depth", c.depth)
}

fn expect_kind(c: &Checkpoint, kind: &str) -> Result<()> {
    let k = c.get("kind")?;
    if k != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {k}")));
    }
    Ok(())
}

pub fn flownet_from(c: Checkpoint) -> Result<FlowNet> {
    expect_kind(&c, "flownet")?;
    let config = FlowNetConfig {
        state_dim: c.get_parsed("state_dim")?,
        num_prompts: c.get_parsed("num_prompts")?,
        num_details: c.get_parsed("num_details")?,
        width: c.get_parsed("width")?,
        depth: c.get_parsed("depth")?,
    };
    FlowNet::from_params(config, c.params)
}

pub fn enhancer_checkpoint(
    cfg: &ExperimentConfig,
    policy: &EnhancerPolicy,
    vocab: &ModifierVocab,
    iteration: usize,
) -> Checkpoint {
    header(cfg, "enhancer", "pe", iteration, policy.params.clone())
        .with("num_prompts", policy.num_prompts)
        .with("vocab_size", policy.vocab_size)
        .with("max_len", policy.max_len)
        .with("hidden", policy.hidden)
        .with("vocab", vocab.describe())
}

pub fn enhancer_from(c: Checkpoint) -> Result<(EnhancerPolicy, ModifierVocab)> {
    expect_kind(&c, "enhancer")?;
    let vocab = ModifierVocab::parse(c.get("vocab")?)?;
    let policy = EnhancerPolicy {
        num_prompts: c.get_parsed("num_prompts")?,
        vocab_size: c.get_parsed("vocab_size")?,
        max_len: c.get_parsed("max_len")?,
        hidden: c.get_parsed("hidden")?,
        params: c.params,
    };
    if policy.vocab_size != vocab.len() {
        return Err(Error::Checkpoint("enhancer vocabulary size disagrees with its token list".into()));
    }
    Ok((policy, vocab))
}

fn mode_name(m: MaskMode) -> &'static str {
    match m {
        MaskMode::Bidirectional => "bidirectional",
        MaskMode::BlockCausal => "block-causal",
    }
}

pub fn student_checkpoint(cfg: &ExperimentConfig, s: &StudentGenerator, stage: &str, iteration: usize) -> Checkpoint {
    let c = &s.config;
    header(cfg, "student", stage, iteration, s.params.clone())
        .with("frames", c.frames)
        .with("frame_dim", c.frame_dim)
        .with("num_prompts", c.num_prompts)
        .with("steps", c.steps)
        .with("width", c.width)
        .with("depth", c.depth)
        .with("mode", mode_name(c.mode))
}

pub fn student_from(c: Checkpoint) -> Result<StudentGenerator> {
    expect_kind(&c, "student")?;
    let mode = match c.get("mode")? {
        "bidirectional" => MaskMode::Bidirectional,
        "block-causal" => MaskMode::BlockCausal,
        other => return Err(Error::Checkpoint(format!("unknown mask mode {other:?}"))),
    };
    let config = StudentConfig {
        frames: c.get_parsed("frames")?,
        frame_dim: c.get_parsed("frame_dim")?,
        num_prompts: c.get_parsed("num_prompts")?,
        steps: c.get_parsed("steps")?,
        width: c.get_parsed("width")?,
        depth: c.get_parsed("depth")?,
        mode,
    };
    // shape check against a fresh student of the same config
    let fresh = StudentGenerator::new(config, &mut RngStream::new(0, 0))?;
    for (name, t) in fresh.params.iter() {
        match c.params.get(name) {
            Some(u) if u.shape() == t.shape() => {}
            _ => return Err(Error::Checkpoint(format!("student array {name} missing or misshapen"))),
        }
    }
    Ok(StudentGenerator {
        config,
        params: c.params,
    })
}

fn dataset_checkpoint(cfg: &ExperimentConfig, data: &Dataset) -> Result<Checkpoint> {
    let n = data.len();
    let mut p = ParamStore::new();
    let t = |shape: Vec<usize>, v: Vec<f64>| Tensor::new(shape, v).map_err(Error::from);
    p.insert("x", t(vec![n, data.dim], data.x.clone())?);
    p.insert("prompt", t(vec![n], data.prompts.iter().map(|&v| v as f64).collect())?);
    p.insert("corrupted", t(vec![n], data.corrupted.iter().map(|&c| c as u8 as f64).collect())?);
    p.insert(
        "detail",
        t(vec![n], data.details.iter().map(|d| d.map_or(-1.0, |d| d as f64)).collect())?,
    );
    Ok(header(cfg, "dataset", "pretrain", 0, p).with("dim", data.dim))
}

fn dataset_from(c: &Checkpoint) -> Result<Dataset> {
    expect_kind(c, "dataset")?;
    let dim: usize = c.get_parsed("dim")?;
    let x = c.params.require("x")?.values();
    let prompt = c.params.require("prompt")?.values();
    let corrupted = c.params.require("corrupted")?.values();
    let detail = c.params.require("detail")?.values();
    let n = prompt.len();
    if x.len() != n * dim || corrupted.len() != n || detail.len() != n {
        return Err(Error::Checkpoint("dataset arrays disagree in length".into()));
    }
    let mut d = Dataset::new(dim);
    for i in 0..n {
        let det = (detail[i] >= 0.0).then_some(detail[i] as usize);
        d.push(&x[i * dim..(i + 1) * dim], prompt[i] as usize, corrupted[i] != 0.0, det);
    }
    Ok(d)
}

fn manifest(task: &Task) -> String {
    let mut s = format!("task {}\nframes {}\nframe_dim {}\n", task.name, task.frames, task.frame_dim);
    for p in &task.prompts {
        let law = match &p.law {
            TargetLaw::Mixture(m) => {
                let means: Vec<String> = m.components().iter().map(|(w, g)| format!("{w}@{:?}", g.mean())).collect();
                format!("mixture {}", means.join(" "))
            }
            TargetLaw::Circle(c) => format!(
                "circle center={:?} radius={} omega={} phase={}",
                c.center, c.radius, c.omega, c.phase
            ),
        };
        let _ = writeln!(s, "prompt {} curated={} {law}", p.id, p.curated);
    }
    s
}

/// What a stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Scalar outcomes, also written to `summary.txt`.
    pub summary: Vec<(String, f64)>,
}

impl StageReport {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

fn finish(cfg: &ExperimentConfig, stage: Stage, log: &MetricsLog, summary: Vec<(String, f64)>) -> Result<StageReport> {
    let dir = stage_dir(cfg, stage);
    let metrics = dir.join("metrics.csv");
    log.write(&metrics)?;
    let mut text = String::new();
    for (k, v) in &summary {
        let _ = writeln!(text, "{k} = {v}");
    }
    std::fs::write(dir.join("summary.txt"), text)?;
    Ok(StageReport {
        stage,
        checkpoint: model_path(cfg, stage),
        metrics,
        summary,
    })
}

/// Runs one stage after checking that its prerequisite exists.
pub fn run_stage(stage: Stage, cfg: &ExperimentConfig) -> Result<StageReport> {
    cfg.validate()?;
    if let Some(pre) = stage.prerequisite() {
        require(cfg, pre)?;
    }
    let dir = stage_dir(cfg, stage);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    info!(stage = stage.name(), out = %dir.display(), "running stage");
    match stage {
        Stage::Pretrain => pretrain(cfg),
        Stage::Sft => sft(cfg),
        Stage::Rlhf => rlhf(cfg),
        Stage::Pe => pe(cfg),
        Stage::Distill => distill(cfg),
    }
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<StageReport>> {
    Stage::ALL.into_iter().map(|s| run_stage(s, cfg)).collect()
}

fn curated_prompts(task: &Task) -> Vec<usize> {
    task.prompts.iter().filter(|p| p.curated).map(|p| p.id).collect()
}

fn fit_logger<'a>(log: &'a mut MetricsLog, tag: &'a str, steps: usize) -> impl FnMut(usize, f64, f64) + 'a {
    move |step, _loss, norm| {
        if step % LOG_EVERY == 0 || step + 1 == steps {
            let mut r = MetricsRow::new(tag, step);
            r.grad_norm = Some(norm);
            // ordering is guaranteed by the caller
            let _ = log.push(r);
        }
    }
}

fn pretrain(cfg: &ExperimentConfig) -> Result<StageReport> {
    let task = cfg.task()?;
    let mut data_rng = RngStream::derive(cfg.seed, "pretrain-data", 0, 0);
    let data = task.generate_dataset(cfg.pretrain.samples_per_prompt, cfg.pretrain.corruption, &mut data_rng)?;
    let dir = stage_dir(cfg, Stage::Pretrain);
    dataset_checkpoint(cfg, &data)?.save(&dir.join("dataset.fgpl"))?;
    std::fs::write(dir.join("manifest.txt"), manifest(&task))?;

    let mut net = FlowNet::new(
        FlowNetConfig::for_task(&task),
        &mut RngStream::derive(cfg.seed, "pretrain-init", 0, 0),
    );
    let mut log = MetricsLog::new(cfg.wall_clock);
    let fit = cfg.pretrain.fit;
    let mut rng = RngStream::derive(cfg.seed, "pretrain", 0, 0);
    fit_flow_matching(&mut net, &data, &fit, &mut rng, "pretrain", fit_logger(&mut log, "pretrain", fit.steps))?;
    let ck = flownet_checkpoint(cfg, &net, "pretrain", fit.steps);
    ck.save(&model_path(cfg, Stage::Pretrain))?;
    // report on what was saved
    let net = flownet_from(ck)?;
    let validity = model_validity(&task, &net, &curated_prompts(&task), 200, &cfg.schedule, cfg.seed)?;
    let mut row = MetricsRow::new("pretrain", fit.steps);
    row.validity = Some(validity);
    log.push(row)?;
    finish(
        cfg,
        Stage::Pretrain,
        &log,
        vec![("validity".into(), validity), ("samples".into(), data.len() as f64)],
    )
}

fn load_flownet(cfg: &ExperimentConfig, stage: Stage) -> Result<FlowNet> {
    flownet_from(Checkpoint::load_checked(&require(cfg, stage)?, &cfg.hash())?)
}

fn sft(cfg: &ExperimentConfig) -> Result<StageReport> {
    let task = cfg.task()?;
    let mut net = load_flownet(cfg, Stage::Pretrain)?;
    let data_path = stage_dir(cfg, Stage::Pretrain).join("dataset.fgpl");
    if !data_path.is_file() {
        return Err(Error::MissingStage("pretrain"));
    }
    let data = dataset_from(&Checkpoint::load(&data_path)?)?;
    let curated = data.curated(&task)?;
    let prompts = curated_prompts(&task);
    let mut log = MetricsLog::new(cfg.wall_clock);
    let before = model_validity(&task, &net, &prompts, 200, &cfg.schedule, cfg.seed)?;
    let mut row = MetricsRow::new("sft", 0);
    row.validity = Some(before);
    log.push(row)?;
    let mut rng = RngStream::derive(cfg.seed, "sft", 0, 0);
    fit_flow_matching(&mut net, &curated, &cfg.sft, &mut rng, "sft", fit_logger(&mut log, "sft", cfg.sft.steps))?;
    let ck = flownet_checkpoint(cfg, &net, "sft", cfg.sft.steps);
    ck.save(&model_path(cfg, Stage::Sft))?;
    let net = flownet_from(ck)?;
    let after = model_validity(&task, &net, &prompts, 200, &cfg.schedule, cfg.seed)?;
    let mut row = MetricsRow::new("sft", cfg.sft.steps);
    row.validity = Some(after);
    log.push(row)?;
    finish(
        cfg,
        Stage::Sft,
        &log,
        vec![
            ("validity_before".into(), before),
            ("validity_after".into(), after),
            ("curated_samples".into(), curated.len() as f64),
        ],
    )
}

/// Reward normalization frozen from SFT samples on the post-training prompts.
pub fn reference_weights(cfg: &ExperimentConfig) -> Result<RewardWeights> {
    let task = cfg.task()?;
    let sft = load_flownet(cfg, Stage::Sft)?;
    let (ids, xs) = sample_per_prompt(
        &sft,
        &cfg.rlhf.prompts,
        cfg.rewards.reference_per_prompt,
        &cfg.schedule,
        cfg.seed,
        "reference",
    )?;
    let rows = ids
        .iter()
        .zip(&xs)
        .map(|(&p, x)| reward_components(&task, p, x))
        .collect::<Result<Vec<_>>>()?;
    let mut w = RewardWeights::new(cfg.rewards.weights, NormStats::from_reference(&rows)?)?;
    w.std_floor = cfg.rewards.std_floor;
    w.validate()?;
    Ok(w)
}

/// Trains on the learned score but reports oracle components, so the
/// metrics show what the learned reward is doing to the true ones.
struct Monitored<'a> {
    learned: &'a RewardNet,
    oracle: &'a OracleReward,
}

impl TerminalReward for Monitored<'_> {
    fn score(&self, prompt: usize, x: &[f64]) -> Result<RewardBundle> {
        let truth = self.oracle.score(prompt, x)?;
        Ok(RewardBundle {
            aggregate: self.learned.score(prompt, x)?.aggregate,
            ..truth
        })
    }
}

fn preference_checkpoint(cfg: &ExperimentConfig, pairs: &[PreferencePair], dim: usize) -> Result<Checkpoint> {
    let n = pairs.len();
    let mut p = ParamStore::new();
    let flat = |f: &dyn Fn(&PreferencePair) -> &[f64]| pairs.iter().flat_map(|q| f(q).to_vec()).collect::<Vec<_>>();
    p.insert("a", Tensor::new(vec![n, dim], flat(&|q| &q.a))?);
    p.insert("b", Tensor::new(vec![n, dim], flat(&|q| &q.b))?);
    p.insert("prompt", Tensor::new(vec![n], pairs.iter().map(|q| q.prompt as f64).collect())?);
    p.insert("preferred", Tensor::new(vec![n], pairs.iter().map(|q| q.preferred as f64).collect())?);
    Ok(header(cfg, "preferences", "rlhf", 0, p))
}

fn learned_reward(cfg: &ExperimentConfig, sft: &FlowNet, oracle: &OracleReward) -> Result<(RewardNet, f64)> {
    let task = &oracle.task;
    let prompts = &cfg.rlhf.prompts;
    let per = cfg.rewards.pairs.div_ceil(prompts.len());
    let (ids, a) = sample_per_prompt(sft, prompts, per, &cfg.schedule, cfg.seed, "preference-a")?;
    let (_, b) = sample_per_prompt(sft, prompts, per, &cfg.schedule, cfg.seed, "preference-b")?;
    // interleave prompts so the held-out tail covers all of them
    let mut samples: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::with_capacity(ids.len());
    for i in 0..per {
        for k in 0..prompts.len() {
            let j = k * per + i;
            samples.push((ids[j], a[j].clone(), b[j].clone()));
        }
    }
    let mut rng = RngStream::derive(cfg.seed, "preference-labels", 0, 0);
    let pairs = make_preferences(oracle, &samples, cfg.rewards.label_noise, &mut rng)?;
    let dir = stage_dir(cfg, Stage::Rlhf);
    preference_checkpoint(cfg, &pairs, task.state_dim())?.save(&dir.join("preferences.fgpl"))?;
    let mut net = RewardNet::new(
        task.state_dim(),
        task.num_prompts(),
        REWARD_HIDDEN,
        &mut RngStream::derive(cfg.seed, "reward-init", 0, 0),
    );
    let mut rng = RngStream::derive(cfg.seed, "reward-train", 0, 0);
    let report = train_reward_model(&mut net, &pairs, &cfg.rewards.train, &mut rng)?;
    header(cfg, "reward", "rlhf", cfg.rewards.train.steps, net.params.clone())
        .with("state_dim", net.state_dim)
        .with("num_prompts", net.num_prompts)
        .with("hidden", net.hidden)
        .save(&dir.join("reward.fgpl"))?;
    Ok((net, report.heldout_accuracy))
}

fn rlhf(cfg: &ExperimentConfig) -> Result<StageReport> {
    let task = cfg.task()?;
    let mut net = load_flownet(cfg, Stage::Sft)?;
    let weights = reference_weights(cfg)?;
    let oracle = OracleReward::new(task.clone(), weights);
    let mut summary = Vec::new();
    let learned = match cfg.rewards.source {
        RewardSource::Oracle => None,
        RewardSource::Learned => {
            let (rm, acc) = learned_reward(cfg, &net, &oracle)?;
            summary.push(("reward_model_heldout_accuracy".into(), acc));
            Some(rm)
        }
    };
    let monitored = learned.as_ref().map(|rm| Monitored {
        learned: rm,
        oracle: &oracle,
    });
    let reward: &dyn TerminalReward = match &monitored {
        Some(m) => m,
        None => &oracle,
    };
    let mut log = MetricsLog::new(cfg.wall_clock);
    let mut first = None;
    let mut last = None;
    let mut push_err = None;
    let result = rlhf_train(&mut net, &task, reward, &cfg.rlhf, &cfg.schedule, cfg.seed, |s| {
        first.get_or_insert(s.mean_reward);
        last = Some(s.mean_reward);
        let mut r = MetricsRow::new("rlhf", s.iteration).with_components(s.components);
        r.mean_reward = Some(s.mean_reward);
        r.clip_frac = Some(s.clip_fraction);
        r.grad_norm = Some(s.grad_norm);
        r.validity = Some(s.validity);
        if let Err(e) = log.push(r) {
            push_err.get_or_insert(e);
        }
    });
    if let Err(e) = result {
        // keep the last good parameters and whatever was logged
        flownet_checkpoint(cfg, &net, "rlhf", 0)
            .with("aborted", "true")
            .save(&model_path(cfg, Stage::Rlhf))?;
        log.write(&stage_dir(cfg, Stage::Rlhf).join("metrics.csv"))?;
        return Err(e);
    }
    if let Some(e) = push_err {
        return Err(e);
    }
    flownet_checkpoint(cfg, &net, "rlhf", cfg.rlhf.iterations).save(&model_path(cfg, Stage::Rlhf))?;
    summary.push(("first_mean_reward".into(), first.unwrap_or(f64::NAN)));
    summary.push(("last_mean_reward".into(), last.unwrap_or(f64::NAN)));
    finish(cfg, Stage::Rlhf, &log, summary)
}

/// The configured modifier vocabulary, or the standard one for the task.
pub fn pe_vocab(cfg: &ExperimentConfig, task: &Task) -> ModifierVocab {
    cfg.pe
        .vocab
        .clone()
        .unwrap_or_else(|| ModifierVocab::standard(task.num_details()))
}

fn pe(cfg: &ExperimentConfig) -> Result<StageReport> {
    let task = cfg.task()?;
    let generator = load_flownet(cfg, Stage::Rlhf)?;
    let norm = reference_weights(cfg)?;
    let vocab = pe_vocab(cfg, &task);
    let reference = EnhancerPolicy::new(
        task.num_prompts(),
        vocab.len(),
        cfg.pe.max_len,
        cfg.pe.hidden,
        &mut RngStream::derive(cfg.seed, "pe-init", 0, 0),
    );
    let mut policy = reference.clone();
    let scorer = OutcomeScorer {
        task: &task,
        generator: &generator,
        vocab: &vocab,
        norm: &norm,
        schedule: &cfg.schedule,
        weights: cfg.pe.weights,
        samples: cfg.pe.samples,
    };
    let mut log = MetricsLog::new(cfg.wall_clock);
    let mut push_err = None;
    let mut last_valid = f64::NAN;
    pe_grpo_train(&mut policy, &reference, &scorer, &cfg.pe.train, cfg.seed, |s| {
        last_valid = s.structure_valid;
        let mut r = MetricsRow::new("pe", s.iteration);
        r.mean_reward = Some(s.mean_reward);
        r.kl = Some(s.kl);
        r.clip_frac = Some(s.clip_fraction);
        r.grad_norm = Some(s.grad_norm);
        r.validity = Some(s.structure_valid);
        if let Err(e) = log.push(r) {
            push_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = push_err {
        return Err(e);
    }
    let ck = enhancer_checkpoint(cfg, &policy, &vocab, cfg.pe.train.iterations);
    ck.save(&model_path(cfg, Stage::Pe))?;
    let (saved, _) = enhancer_from(ck)?;
    let mut summary = Vec::new();
    let mut total = 0.0;
    for &p in &cfg.pe.train.prompts {
        let kl = exact_sequence_kl(&saved, &reference, &vocab, p)?;
        summary.push((format!("exact_kl_prompt_{p}"), kl));
        total += kl;
    }
    summary.push(("exact_kl_mean".into(), total / cfg.pe.train.prompts.len() as f64));
    summary.push(("structure_valid_last".into(), last_valid));
    finish(cfg, Stage::Pe, &log, summary)
}

/// Paired-noise teacher and student rollouts over the motion prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureReport {
    pub frame_errors: Vec<(String, Vec<f64>)>,
    pub slopes: Vec<(String, f64)>,
}

fn distill(cfg: &ExperimentConfig) -> Result<StageReport> {
    let task = cfg.task()?;
    let teacher = load_flownet(cfg, Stage::Rlhf)?;
    let d = &cfg.distill;
    let dir = stage_dir(cfg, Stage::Distill);
    let mut log = MetricsLog::new(cfg.wall_clock);
    let mut push_err = None;
    let mut note = |r: MetricsRow| {
        if let Err(e) = log.push(r) {
            push_err.get_or_insert(e);
        }
    };

    let mut sc = StudentConfig::for_task(&task, MaskMode::Bidirectional);
    sc.steps = d.steps;
    let mut s1 = StudentGenerator::new(sc, &mut RngStream::derive(cfg.seed, "student-init", 0, 0))?;
    let mut fake = teacher.clone();
    stage1_dmd(&mut s1, &teacher, &mut fake, &d.dmd, &cfg.schedule, cfg.seed, |s| {
        let mut r = MetricsRow::new("distill-dmd", s.iteration);
        r.grad_norm = Some(s.grad_norm);
        note(r);
    })?;
    let ck = student_checkpoint(cfg, &s1, "distill-dmd", d.dmd.iterations);
    ck.save(&dir.join("stage1.fgpl"))?;
    let s1 = student_from(ck)?;

    let pairs = collect_ode_pairs(&teacher, &d.dmd.prompts, d.pairs, &cfg.schedule, cfg.seed, "distill-pairs")?;
    let mut s2 = s1.derive_student(MaskMode::BlockCausal, &mut RngStream::derive(cfg.seed, "student-causal", 0, 0))?;
    let steps = d.regress.steps;
    stage2_causal_regression(&mut s2, &pairs, &d.regress, cfg.seed, |step, _, norm| {
        if step % LOG_EVERY == 0 || step + 1 == steps {
            let mut r = MetricsRow::new("distill-regress", step);
            r.grad_norm = Some(norm);
            note(r);
        }
    })?;
    let ck = student_checkpoint(cfg, &s2, "distill-regress", steps);
    ck.save(&dir.join("stage2.fgpl"))?;
    let s2 = student_from(ck)?;

    let mut s3 = s2.clone();
    let mut fake3 = teacher.clone();
    stage3_self_forcing(&mut s3, &teacher, &mut fake3, &d.self_forcing, &cfg.schedule, cfg.seed, |s| {
        let mut r = MetricsRow::new("distill-self-forcing", s.iteration);
        r.grad_norm = Some(s.grad_norm);
        note(r);
    })?;
    let ck = student_checkpoint(cfg, &s3, "distill-self-forcing", d.self_forcing.iterations);
    ck.save(&model_path(cfg, Stage::Distill))?;
    let s3 = student_from(ck)?;
    if let Some(e) = push_err {
        return Err(e);
    }

    let mut summary = Vec::new();
    let probe_ok = d.dmd.prompts.iter().try_fold(true, |ok, &p| {
        Ok::<_, Error>(ok && causality_probe(&s3, p, cfg.seed)?.passed())
    })?;
    summary.push(("causality_probe_passed".into(), probe_ok as u8 as f64));
    let motion = d
        .dmd
        .prompts
        .iter()
        .all(|&p| matches!(task.prompt(p).map(|s| &s.law), Ok(TargetLaw::Circle(_))));
    if motion && d.eval_samples > 0 {
        let rep = exposure(cfg, &task, &teacher, &[("stage2", &s2), ("stage3", &s3)], &mut summary)?;
        write_exposure(&dir.join("exposure.csv"), &rep)?;
    }
    finish(cfg, Stage::Distill, &log, summary)
}

fn exposure(
    cfg: &ExperimentConfig,
    task: &Task,
    teacher: &FlowNet,
    students: &[(&str, &StudentGenerator)],
    summary: &mut Vec<(String, f64)>,
) -> Result<ExposureReport> {
    let prompts = &cfg.distill.dmd.prompts;
    let n = cfg.distill.eval_samples;
    let ids: Vec<usize> = (0..n).map(|i| prompts[i % prompts.len()]).collect();
    let specs = ids
        .iter()
        .enumerate()
        .map(|(i, &p)| PathSpec::new(p, SdeSteps::None, RngStream::derive(cfg.seed, "distill-eval", p as u64, i as u64)))
        .collect();
    let paths = sample_paths(teacher, &Cond::Prompts(ids.clone()), &cfg.schedule, specs)?;
    let eps: Vec<f64> = paths.iter().flat_map(|p| p.states[0].iter().copied()).collect();
    let tx: Vec<f64> = paths.iter().flat_map(|p| p.terminal().iter().copied()).collect();
    let dim = task.state_dim();
    let motion = |xs: &[f64]| -> Result<Vec<f64>> {
        xs.chunks(dim).map(|x| reward_motion(x, task.frame_dim)).collect()
    };
    let teacher_motion = motion(&tx)?;
    let mut rep = ExposureReport {
        frame_errors: Vec::new(),
        slopes: Vec::new(),
    };
    let e = frame_errors(task, &ids, &tx)?;
    rep.slopes.push(("teacher".into(), growth_slope(&e)));
    rep.frame_errors.push(("teacher".into(), e));
    for (name, s) in students {
        let xs = s.generate(&ids, &eps)?;
        let e = frame_errors(task, &ids, &xs)?;
        let slope = growth_slope(&e);
        summary.push((format!("slope_{name}"), slope));
        rep.slopes.push((name.to_string(), slope));
        rep.frame_errors.push((name.to_string(), e));
        let g = gsb_compare(&teacher_motion, &motion(&xs)?, cfg.eval.delta)?;
        summary.push((format!("motion_same_{name}"), g.same));
    }
    Ok(rep)
}

fn write_exposure(path: &Path, rep: &ExposureReport) -> Result<()> {
    let frames = rep.frame_errors.first().map_or(0, |(_, e)| e.len());
    let mut s = String::from("model,slope");
    for f in 0..frames {
        let _ = write!(s, ",frame_{f}");
    }
    s.push('\n');
    for ((name, e), (_, slope)) in rep.frame_errors.iter().zip(&rep.slopes) {
        let _ = write!(s, "{name},{slope}");
        for v in e {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Loads whatever a stage left behind as a sampler for evaluation.
pub(crate) fn load_stage_generator(cfg: &ExperimentConfig, stage: Stage) -> Result<FlowNet> {
    load_flownet(cfg, stage)
}

pub(crate) fn load_stage_student(cfg: &ExperimentConfig) -> Result<StudentGenerator> {
    student_from(Checkpoint::load_checked(&require(cfg, Stage::Distill)?, &cfg.hash())?)
}

pub(crate) fn load_stage_enhancer(cfg: &ExperimentConfig) -> Result<(EnhancerPolicy, ModifierVocab)> {
    enhancer_from(Checkpoint::load_checked(&require(cfg, Stage::Pe)?, &cfg.hash())?)
}
