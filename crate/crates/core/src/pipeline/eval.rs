//! Paired Good/Same/Bad comparison of two trained models.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use diffcore::RngStream;

use crate::ardistill::StudentGenerator;
use crate::error::{Error, Result};
use crate::flowsde::{sample_terminals, Cond, PathSpec, SdeSteps};
use crate::genmodel::FlowNet;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::ExperimentConfig;
use crate::pipeline::stages::{
    flownet_from, load_stage_enhancer, load_stage_generator, load_stage_student, reference_weights, student_from,
    Stage,
};
use crate::promptenh::{apply_effects, sample_enhanced, EnhancerPolicy, ModifierVocab};
use crate::rewards::{gsb_compare, Aspect, Gsb, OracleReward, RewardBundle, TerminalReward};

/// A sampler that can be compared.
#[derive(Debug, Clone)]
pub enum Model {
    Generator(FlowNet),
    /// A generator driven through a prompt enhancer.
    Enhanced {
        generator: FlowNet,
        policy: EnhancerPolicy,
        vocab: ModifierVocab,
    },
    Student(StudentGenerator),
}

impl Model {
    /// `pretrain`, `sft`, `rlhf`, `pe` (RLHF generator plus enhancer),
    /// `distill`, or a path to a generator or student checkpoint.
    pub fn load(cfg: &ExperimentConfig, spec: &str) -> Result<(String, Self)> {
        if let Ok(stage) = Stage::parse(spec) {
            let m = match stage {
                Stage::Pe => {
                    let (policy, vocab) = load_stage_enhancer(cfg)?;
                    Model::Enhanced {
                        generator: load_stage_generator(cfg, Stage::Rlhf)?,
                        policy,
                        vocab,
                    }
                }
                Stage::Distill => Model::Student(load_stage_student(cfg)?),
                s => Model::Generator(load_stage_generator(cfg, s)?),
            };
            return Ok((spec.to_string(), m));
        }
        let path = Path::new(spec);
        let c = Checkpoint::load_checked(path, &cfg.hash())?;
        let label = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        let m = match c.get("kind")? {
            "flownet" => Model::Generator(flownet_from(c)?),
            "student" => Model::Student(student_from(c)?),
            k => {
                return Err(Error::Invalid(format!(
                    "cannot sample from a {k} checkpoint on its own; use the stage name"
                )))
            }
        };
        Ok((label, m))
    }

    /// `per_prompt` terminal samples for each prompt. Sample `i` of prompt
    /// `p` starts from the noise stream `(seed, "eval", p, i)` whatever the
    /// model, so two models see the same starting noise.
    pub fn sample(
        &self,
        prompts: &[usize],
        per_prompt: usize,
        cfg: &ExperimentConfig,
    ) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let ids: Vec<usize> = prompts
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, per_prompt))
            .collect();
        let index = |k: usize| (k % per_prompt.max(1)) as u64;
        let stream = |k: usize| RngStream::derive(cfg.seed, "eval", ids[k] as u64, index(k));
        let xs = match self {
            Model::Generator(net) => {
                let specs = (0..ids.len()).map(|k| PathSpec::new(ids[k], SdeSteps::None, stream(k))).collect();
                sample_terminals(net, &Cond::Prompts(ids.clone()), &cfg.schedule, specs)?
            }
            Model::Enhanced {
                generator,
                policy,
                vocab,
            } => {
                let mut emb = Vec::new();
                let mut dim = 0;
                let mut specs = Vec::with_capacity(ids.len());
                for (k, &p) in ids.iter().enumerate() {
                    let mut rng = RngStream::derive(cfg.seed, "eval-pe", p as u64, index(k));
                    let y = sample_enhanced(policy, vocab, p, &mut rng)?;
                    let c = apply_effects(vocab, generator, p, &y.tokens)?;
                    dim = c.embedding.len();
                    emb.extend_from_slice(&c.embedding);
                    let mut spec = PathSpec::new(p, SdeSteps::None, stream(k));
                    spec.noise_scale = c.noise_scale;
                    specs.push(spec);
                }
                sample_terminals(generator, &Cond::Embeddings { dim, values: emb }, &cfg.schedule, specs)?
            }
            Model::Student(s) => {
                let d = s.config.state_dim();
                let mut eps = Vec::with_capacity(ids.len() * d);
                for k in 0..ids.len() {
                    eps.extend(stream(k).gaussian(d));
                }
                s.generate(&ids, &eps)?.chunks(d).map(<[f64]>::to_vec).collect()
            }
        };
        Ok((ids, xs))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AspectRow {
    pub aspect: Aspect,
    pub gsb: Gsb,
    pub mean_a: f64,
    pub mean_b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub a: String,
    pub b: String,
    pub prompts: Vec<usize>,
    pub delta: f64,
    pub rows: Vec<AspectRow>,
}

impl EvalReport {
    pub fn aspect(&self, aspect: Aspect) -> &AspectRow {
        self.rows.iter().find(|r| r.aspect == aspect).expect("every aspect is reported")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("aspect,good,same,bad,net,pairs\n");
        for r in &self.rows {
            let g = &r.gsb;
            let _ = writeln!(s, "{},{},{},{},{},{}", r.aspect.name(), g.good, g.same, g.bad, g.net(), g.pairs);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} vs {} on prompts {:?}, delta {}\n",
            self.a, self.b, self.prompts, self.delta
        );
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>7} {:>8} {:>10} {:>10}",
            "aspect", "good", "same", "bad", "net", "mean A", "mean B"
        );
        for r in &self.rows {
            let g = &r.gsb;
            let _ = writeln!(
                s,
                "{:<10} {:>7.3} {:>7.3} {:>7.3} {:>+8.3} {:>10.4} {:>10.4}",
                r.aspect.name(),
                g.good,
                g.same,
                g.bad,
                g.net(),
                r.mean_a,
                r.mean_b
            );
        }
        let _ = writeln!(s, "pairs: {}", self.rows.first().map_or(0, |r| r.gsb.pairs));
        s
    }

    /// Writes `<dir>/<a>_vs_<b>.csv` and `.txt`; returns the CSV path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("{}_vs_{}", self.a, self.b);
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.summary())?;
        Ok(csv)
    }
}

/// Compares two models on paired samples. Rewards are normalized with the
/// statistics of the SFT reference batch; per-component aspects compare the
/// raw component values.
pub fn evaluate(
    cfg: &ExperimentConfig,
    a: (&str, &Model),
    b: (&str, &Model),
    prompts: &[usize],
    delta: f64,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::Invalid("evaluation needs at least one prompt".into()));
    }
    let task = cfg.task()?;
    if let Some(&p) = prompts.iter().find(|&&p| p >= task.num_prompts()) {
        return Err(Error::UnknownPrompt(p));
    }
    let oracle = OracleReward::new(task, reference_weights(cfg)?);
    let score = |m: &Model| -> Result<Vec<RewardBundle>> {
        let (ids, xs) = m.sample(prompts, cfg.eval.per_prompt, cfg)?;
        ids.iter().zip(&xs).map(|(&p, x)| oracle.score(p, x)).collect()
    };
    let ra = score(a.1)?;
    let rb = score(b.1)?;
    let mut rows = Vec::new();
    for aspect in Aspect::ALL {
        let va: Vec<f64> = ra.iter().map(|r| r.aspect(aspect)).collect();
        let vb: Vec<f64> = rb.iter().map(|r| r.aspect(aspect)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        rows.push(AspectRow {
            aspect,
            gsb: gsb_compare(&va, &vb, delta)?,
            mean_a: mean(&va),
            mean_b: mean(&vb),
        });
    }
    Ok(EvalReport {
        a: a.0.to_string(),
        b: b.0.to_string(),
        prompts: prompts.to_vec(),
        delta,
        rows,
    })
}

/// Loads both models by name or path, compares them and writes the report
/// under `<out>/eval`.
pub fn evaluate_named(cfg: &ExperimentConfig, a: &str, b: &str, delta: f64) -> Result<(EvalReport, PathBuf)> {
    let (la, ma) = Model::load(cfg, a)?;
    let (lb, mb) = Model::load(cfg, b)?;
    let rep = evaluate(cfg, (&la, &ma), (&lb, &mb), &cfg.eval.prompts, delta)?;
    let path = rep.write(&cfg.out.join("eval"))?;
    Ok((rep, path))
}
