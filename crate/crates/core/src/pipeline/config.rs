//! Experiment configuration: flat `key = value` lines grouped under
//! `[section]` headers. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::ardistill::{DmdConfig, RegressionConfig};
use crate::error::{Error, Result};
use crate::flowsde::NoiseSchedule;
use crate::genmodel::{FitConfig, Task};
use crate::grpoflow::GrpoConfig;
use crate::promptenh::{ModifierVocab, PeConfig, PeRewardWeights};
use crate::rewards::RewardTrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardSource {
    Oracle,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub samples_per_prompt: usize,
    pub corruption: f64,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    pub weights: [f64; 4],
    /// Reference samples per post-training prompt for the frozen statistics.
    pub reference_per_prompt: usize,
    pub std_floor: f64,
    pub source: RewardSource,
    /// Preference pairs for the learned reward.
    pub pairs: usize,
    pub label_noise: f64,
    pub train: RewardTrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeSettings {
    pub train: PeConfig,
    pub samples: usize,
    pub max_len: usize,
    pub hidden: usize,
    pub weights: PeRewardWeights,
    /// `None` means the standard vocabulary for the task.
    pub vocab: Option<ModifierVocab>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillSettings {
    pub steps: usize,
    pub dmd: DmdConfig,
    pub pairs: usize,
    pub regress: RegressionConfig,
    pub self_forcing: DmdConfig,
    /// Paired rollouts for the exposure report.
    pub eval_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub per_prompt: usize,
    pub delta: f64,
    pub prompts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: String,
    pub out: PathBuf,
    /// Record wall-clock seconds in the metrics files. Off by default so
    /// that reruns reproduce them byte for byte.
    pub wall_clock: bool,
    pub schedule: NoiseSchedule,
    pub pretrain: PretrainConfig,
    pub sft: FitConfig,
    pub rewards: RewardConfig,
    pub rlhf: GrpoConfig,
    pub pe: PeSettings,
    pub distill: DistillSettings,
    pub eval: EvalSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            task: "point".into(),
            out: PathBuf::from("runs/point"),
            wall_clock: false,
            schedule: NoiseSchedule::default(),
            pretrain: PretrainConfig {
                samples_per_prompt: 2000,
                corruption: 0.2,
                fit: FitConfig {
                    steps: 3000,
                    batch: 256,
                    lr: 2e-3,
                    grad_clip: 5.0,
                    detail_rate: 0.5,
                },
            },
            sft: FitConfig {
                steps: 1500,
                batch: 256,
                lr: 1e-3,
                grad_clip: 5.0,
                detail_rate: 0.5,
            },
            rewards: RewardConfig {
                weights: [0.3, 0.3, 0.2, 0.2],
                reference_per_prompt: 334,
                std_floor: 1e-8,
                source: RewardSource::Oracle,
                pairs: 2000,
                label_noise: 0.1,
                train: RewardTrainConfig::default(),
            },
            rlhf: GrpoConfig::default(),
            pe: PeSettings {
                train: PeConfig::default(),
                samples: 16,
                max_len: 4,
                hidden: 32,
                weights: PeRewardWeights::default(),
                vocab: None,
            },
            distill: DistillSettings {
                steps: 4,
                dmd: DmdConfig::default(),
                pairs: 3000,
                regress: RegressionConfig::default(),
                self_forcing: DmdConfig::default(),
                eval_samples: 600,
            },
            eval: EvalSettings {
                per_prompt: 100,
                delta: 0.1,
                prompts: vec![0, 1, 2],
            },
        }
    }
}

const SECTIONS: [&str; 8] = ["schedule", "pretrain", "sft", "rewards", "rlhf", "pe", "distill", "eval"];

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| err(line, format!("cannot parse {v:?}")))
}

fn list(v: &str, line: usize) -> Result<Vec<usize>> {
    v.split(',').map(|s| num(s.trim(), line)).collect()
}

fn render_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn bool_value(v: &str, line: usize) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(line, format!("expected true or false, got {v:?}"))),
    }
}

/// Parses `a,v,i,m` reward weights.
pub fn parse_weights(v: &str) -> Result<[f64; 4]> {
    let w: Vec<f64> = v
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| err(0, format!("cannot parse weights {v:?}")))?;
    w.try_into().map_err(|_| err(0, "weights need four values"))
}

fn fit_key(fit: &mut FitConfig, key: &str, v: &str, line: usize) -> Result<bool> {
    match key {
        "steps" => fit.steps = num(v, line)?,
        "batch" => fit.batch = num(v, line)?,
        "lr" => fit.lr = num(v, line)?,
        "grad_clip" => fit.grad_clip = num(v, line)?,
        "detail_rate" => fit.detail_rate = num(v, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn dmd_key(d: &mut DmdConfig, prefix: &str, key: &str, v: &str, line: usize) -> Result<bool> {
    let Some(key) = key.strip_prefix(prefix) else {
        return Ok(false);
    };
    match key {
        "iterations" => d.iterations = num(v, line)?,
        "batch" => d.batch = num(v, line)?,
        "lr" => d.lr = num(v, line)?,
        "fake_lr" => d.fake_lr = num(v, line)?,
        "fake_updates" => d.fake_updates = num(v, line)?,
        "grad_clip" => d.grad_clip = num(v, line)?,
        "t_floor" => d.t_floor = num(v, line)?,
        "final_lr_scale" => d.final_lr_scale = num(v, line)?,
        "prompts" => d.prompts = list(v, line)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(name) = l.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(line, "unterminated section header"))?;
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(err(line, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key = value, got {l:?}")))?;
            cfg.set_at(&section, k.trim(), v.trim(), line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets `section.key` (or a top-level key) from command-line overrides.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        let (section, key) = path.rsplit_once('.').unwrap_or(("", path));
        self.set_at(section, key, value, 0)
    }

    fn set_at(&mut self, section: &str, key: &str, v: &str, line: usize) -> Result<()> {
        let known = match section {
            "" => {
                match key {
                    "seed" => self.seed = num(v, line)?,
                    "task" => self.task = v.to_string(),
                    "out" => self.out = PathBuf::from(v),
                    "wall_clock" => self.wall_clock = bool_value(v, line)?,
                    _ => return Err(err(line, format!("unknown key {key:?}"))),
                }
                true
            }
            "schedule" => {
                let s = &mut self.schedule;
                match key {
                    "steps" => s.steps = num(v, line)?,
                    "eta" => s.eta = num(v, line)?,
                    "t_min" => s.t_min = num(v, line)?,
                    "t_max" => s.t_max = num(v, line)?,
                    _ => return Err(err(line, format!("unknown key {key:?} in [schedule]"))),
                }
                true
            }
            "pretrain" => match key {
                "samples_per_prompt" => {
                    self.pretrain.samples_per_prompt = num(v, line)?;
                    true
                }
                "corruption" => {
                    self.pretrain.corruption = num(v, line)?;
                    true
                }
                _ => fit_key(&mut self.pretrain.fit, key, v, line)?,
            },
            "sft" => fit_key(&mut self.sft, key, v, line)?,
            "rewards" => {
                let r = &mut self.rewards;
                match key {
                    "weights" => r.weights = parse_weights(v).map_err(|_| err(line, format!("bad weights {v:?}")))?,
                    "reference_per_prompt" => r.reference_per_prompt = num(v, line)?,
                    "std_floor" => r.std_floor = num(v, line)?,
                    "source" => {
                        r.source = match v {
                            "oracle" => RewardSource::Oracle,
                            "learned" => RewardSource::Learned,
                            _ => return Err(err(line, format!("reward source must be oracle or learned, got {v:?}"))),
                        }
                    }
                    "pairs" => r.pairs = num(v, line)?,
                    "label_noise" => r.label_noise = num(v, line)?,
                    "rm_steps" => r.train.steps = num(v, line)?,
                    "rm_batch" => r.train.batch = num(v, line)?,
                    "rm_lr" => r.train.lr = num(v, line)?,
                    _ => return Err(err(line, format!("unknown key {key:?} in [rewards]"))),
                }
                true
            }
            "rlhf" => {
                let g = &mut self.rlhf;
                match key {
                    "group_size" => g.group_size = num(v, line)?,
                    "groups" => g.groups = num(v, line)?,
                    "clip" => g.clip = num(v, line)?,
                    "lr" => g.lr = num(v, line)?,
                    "iterations" => g.iterations = num(v, line)?,
                    "std_floor" => g.std_floor = num(v, line)?,
                    "inner_steps" => g.inner_steps = num(v, line)?,
                    "grad_clip" => g.grad_clip = num(v, line)?,
                    "cycling" => g.cycling = bool_value(v, line)?,
                    "prompts" => g.prompts = list(v, line)?,
                    "detail_rate" => g.detail_rate = num(v, line)?,
                    "collapse_window" => g.collapse_window = num(v, line)?,
                    _ => return Err(err(line, format!("unknown key {key:?} in [rlhf]"))),
                }
                true
            }
            "pe" => {
                let p = &mut self.pe;
                match key {
                    "group_size" => p.train.group_size = num(v, line)?,
                    "clip" => p.train.clip = num(v, line)?,
                    "beta_kl" => p.train.beta_kl = num(v, line)?,
                    "lr" => p.train.lr = num(v, line)?,
                    "iterations" => p.train.iterations = num(v, line)?,
                    "prompts" => p.train.prompts = list(v, line)?,
                    "samples" => p.samples = num(v, line)?,
                    "max_len" => p.max_len = num(v, line)?,
                    "hidden" => p.hidden = num(v, line)?,
                    "w_alignment" => p.weights.alignment = num(v, line)?,
                    "w_aesthetic" => p.weights.aesthetic = num(v, line)?,
                    "w_structure" => p.weights.structure = num(v, line)?,
                    "vocab" => {
                        p.vocab = if v == "standard" {
                            None
                        } else {
                            Some(ModifierVocab::parse(v).map_err(|e| err(line, e.to_string()))?)
                        }
                    }
                    _ => return Err(err(line, format!("unknown key {key:?} in [pe]"))),
                }
                true
            }
            "distill" => {
                let d = &mut self.distill;
                match key {
                    "steps" => d.steps = num(v, line)?,
                    "pairs" => d.pairs = num(v, line)?,
                    "eval_samples" => d.eval_samples = num(v, line)?,
                    "regress_steps" => d.regress.steps = num(v, line)?,
                    "regress_batch" => d.regress.batch = num(v, line)?,
                    "regress_lr" => d.regress.lr = num(v, line)?,
                    "prompts" => {
                        d.dmd.prompts = list(v, line)?;
                        d.self_forcing.prompts = d.dmd.prompts.clone();
                    }
                    _ => {
                        return if dmd_key(&mut d.dmd, "dmd_", key, v, line)?
                            || dmd_key(&mut d.self_forcing, "sf_", key, v, line)?
                        {
                            Ok(())
                        } else {
                            Err(err(line, format!("unknown key {key:?} in [distill]")))
                        }
                    }
                }
                true
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "per_prompt" => e.per_prompt = num(v, line)?,
                    "delta" => e.delta = num(v, line)?,
                    "prompts" => e.prompts = list(v, line)?,
                    _ => return Err(err(line, format!("unknown key {key:?} in [eval]"))),
                }
                true
            }
            other => return Err(err(line, format!("unknown section [{other}]"))),
        };
        if !known {
            return Err(err(line, format!("unknown key {key:?} in [{section}]")));
        }
        Ok(())
    }

    pub fn task(&self) -> Result<Task> {
        Task::by_name(&self.task)
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task().map_err(|e| err(0, e.to_string()))?;
        self.schedule.validate()?;
        let n = task.num_prompts();
        let groups: [(&str, &[usize]); 4] = [
            ("rlhf.prompts", &self.rlhf.prompts),
            ("pe.prompts", &self.pe.train.prompts),
            ("distill.prompts", &self.distill.dmd.prompts),
            ("eval.prompts", &self.eval.prompts),
        ];
        for (name, ids) in groups {
            if ids.is_empty() {
                return Err(err(0, format!("{name} is empty")));
            }
            if let Some(bad) = ids.iter().find(|&&p| p >= n) {
                return Err(err(0, format!("{name} refers to prompt {bad}, task {} has {n}", task.name)));
            }
        }
        if self.rewards.weights.iter().any(|w| *w < 0.0) || self.rewards.weights.iter().all(|w| *w == 0.0) {
            return Err(err(0, "reward weights must be nonnegative with one positive"));
        }
        if self.eval.delta < 0.0 {
            return Err(err(0, "eval.delta must be nonnegative"));
        }
        self.rlhf.validate()?;
        Ok(())
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "seed = {}", self.seed);
        let _ = writeln!(w, "task = {}", self.task);
        let _ = writeln!(w, "out = {}", self.out.display());
        let _ = writeln!(w, "wall_clock = {}", self.wall_clock);
        let sc = &self.schedule;
        let _ = writeln!(w, "\n[schedule]\nsteps = {}\neta = {}\nt_min = {}\nt_max = {}", sc.steps, sc.eta, sc.t_min, sc.t_max);
        let fit = |w: &mut String, f: &FitConfig| {
            let _ = writeln!(
                w,
                "steps = {}\nbatch = {}\nlr = {}\ngrad_clip = {}\ndetail_rate = {}",
                f.steps, f.batch, f.lr, f.grad_clip, f.detail_rate
            );
        };
        let _ = writeln!(
            w,
            "\n[pretrain]\nsamples_per_prompt = {}\ncorruption = {}",
            self.pretrain.samples_per_prompt, self.pretrain.corruption
        );
        fit(w, &self.pretrain.fit);
        let _ = writeln!(w, "\n[sft]");
        fit(w, &self.sft);
        let r = &self.rewards;
        let _ = writeln!(
            w,
            "\n[rewards]\nweights = {}\nreference_per_prompt = {}\nstd_floor = {}\nsource = {}\npairs = {}\nlabel_noise = {}\nrm_steps = {}\nrm_batch = {}\nrm_lr = {}",
            r.weights.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            r.reference_per_prompt,
            r.std_floor,
            match r.source {
                RewardSource::Oracle => "oracle",
                RewardSource::Learned => "learned",
            },
            r.pairs,
            r.label_noise,
            r.train.steps,
            r.train.batch,
            r.train.lr
        );
        let g = &self.rlhf;
        let _ = writeln!(
            w,
            "\n[rlhf]\ngroup_size = {}\ngroups = {}\nclip = {}\nlr = {}\niterations = {}\nstd_floor = {}\ninner_steps = {}\ngrad_clip = {}\ncycling = {}\nprompts = {}\ndetail_rate = {}\ncollapse_window = {}",
            g.group_size,
            g.groups,
            g.clip,
            g.lr,
            g.iterations,
            g.std_floor,
            g.inner_steps,
            g.grad_clip,
            g.cycling,
            render_list(&g.prompts),
            g.detail_rate,
            g.collapse_window
        );
        let p = &self.pe;
        let _ = writeln!(
            w,
            "\n[pe]\ngroup_size = {}\nclip = {}\nbeta_kl = {}\nlr = {}\niterations = {}\nprompts = {}\nsamples = {}\nmax_len = {}\nhidden = {}\nw_alignment = {}\nw_aesthetic = {}\nw_structure = {}\nvocab = {}",
            p.train.group_size,
            p.train.clip,
            p.train.beta_kl,
            p.train.lr,
            p.train.iterations,
            render_list(&p.train.prompts),
            p.samples,
            p.max_len,
            p.hidden,
            p.weights.alignment,
            p.weights.aesthetic,
            p.weights.structure,
            p.vocab.as_ref().map(|v| v.describe()).unwrap_or_else(|| "standard".into())
        );
        let d = &self.distill;
        let _ = writeln!(
            w,
            "\n[distill]\nsteps = {}\npairs = {}\neval_samples = {}\nregress_steps = {}\nregress_batch = {}\nregress_lr = {}\nprompts = {}",
            d.steps,
            d.pairs,
            d.eval_samples,
            d.regress.steps,
            d.regress.batch,
            d.regress.lr,
            render_list(&d.dmd.prompts)
        );
        for (prefix, c) in [("dmd_", &d.dmd), ("sf_", &d.self_forcing)] {
            let _ = writeln!(
                w,
                "{prefix}iterations = {}\n{prefix}batch = {}\n{prefix}lr = {}\n{prefix}fake_lr = {}\n{prefix}fake_updates = {}\n{prefix}grad_clip = {}\n{prefix}t_floor = {}\n{prefix}final_lr_scale = {}",
                c.iterations, c.batch, c.lr, c.fake_lr, c.fake_updates, c.grad_clip, c.t_floor, c.final_lr_scale
            );
        }
        let e = &self.eval;
        let _ = writeln!(
            w,
            "\n[eval]\nper_prompt = {}\ndelta = {}\nprompts = {}",
            e.per_prompt,
            e.delta,
            render_list(&e.prompts)
        );
        s
    }

    /// Hex SHA-256 of the canonical text, excluding the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(c.to_text().as_bytes()))
    }

    /// Defaults that suit `task`: prompt sets and reward weights.
    pub fn for_task(task: &str) -> Result<Self> {
        let t = Task::by_name(task)?;
        let mut c = Self {
            task: task.to_string(),
            out: PathBuf::from(format!("runs/{task}")),
            ..Self::default()
        };
        let curated: Vec<usize> = t.prompts.iter().filter(|p| p.curated).map(|p| p.id).collect();
        c.rlhf.prompts = curated.clone();
        c.pe.train.prompts = curated.clone();
        c.distill.dmd.prompts = curated.clone();
        c.distill.self_forcing.prompts = curated.clone();
        c.eval.prompts = curated;
        Ok(c)
    }
}
