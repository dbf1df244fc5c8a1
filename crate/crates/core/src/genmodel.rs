//! Toy conditional generators: prompt laws, datasets, the velocity network
//! and flow-matching training.

use diffcore::{Adam, AdamConfig, Graph, ParamStore, RngStream, Var};
use tracing::debug;

use crate::error::{invalid, Error, Result};
use crate::flowsde::{sample_terminals, Cond, NoiseSchedule, PathSpec, SdeSteps, VelocityField};
use crate::gaussian::MvGaussian;
use crate::nn::{self, Bind, TIME_FEATURES};

pub const PROMPT_EMBED: usize = 8;

/// Weighted Gaussian mixture.
#[derive(Debug, Clone)]
pub struct Mixture {
    components: Vec<(f64, MvGaussian)>,
}

impl Mixture {
    pub fn new(components: Vec<(f64, MvGaussian)>) -> Result<Self> {
        if components.is_empty() {
            return Err(invalid("mixture needs a component"));
        }
        let total: f64 = components.iter().map(|c| c.0).sum();
        if (total - 1.0).abs() > 1e-9 || components.iter().any(|c| c.0 < 0.0) {
            return Err(invalid(format!("mixture weights must be nonnegative and sum to 1, got {total}")));
        }
        let d = components[0].1.dim();
        if components.iter().any(|c| c.1.dim() != d) {
            return Err(invalid("mixture components differ in dimension"));
        }
        Ok(Self { components })
    }

    pub fn single(g: MvGaussian) -> Self {
        Self {
            components: vec![(1.0, g)],
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn components(&self) -> &[(f64, MvGaussian)] {
        &self.components
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .filter(|c| c.0 > 0.0)
            .map(|(w, g)| w.ln() + g.log_density(x))
            .collect();
        let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return m;
        }
        m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
    }

    /// Best single-component log-density.
    pub fn best_component_log_density(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|(_, g)| g.log_density(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Squared Euclidean distance to the nearest component mean.
    pub fn nearest_mode_sq(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|(_, g)| g.mean().iter().zip(x).map(|(m, x)| (x - m) * (x - m)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_mahalanobis(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|(_, g)| g.mahalanobis_sq(x))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        self.sample_labeled(rng).0
    }

    /// A draw together with the index of the component it came from.
    pub fn sample_labeled(&self, rng: &mut RngStream) -> (Vec<f64>, usize) {
        let weights: Vec<f64> = self.components.iter().map(|c| c.0).collect();
        let k = rng.categorical(&weights);
        (self.components[k].1.sample(rng), k)
    }
}

/// A prompt that draws `frames` points on a circle, advancing by a fixed angle per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleMotion {
    pub center: [f64; 2],
    pub radius: f64,
    /// Angle advanced per frame (radians).
    pub omega: f64,
    /// Mean starting angle.
    pub phase: f64,
    pub phase_jitter: f64,
    pub radius_jitter: f64,
    pub frame_noise: f64,
}

impl CircleMotion {
    pub fn point(&self, angle: f64, radius: f64) -> [f64; 2] {
        [
            self.center[0] + radius * angle.cos(),
            self.center[1] + radius * angle.sin(),
        ]
    }

    pub fn angle_of(&self, p: &[f64]) -> f64 {
        (p[1] - self.center[1]).atan2(p[0] - self.center[0])
    }

    /// Noise-free path through frame 0's angle.
    pub fn anchored_path(&self, frame0: &[f64], frames: usize) -> Vec<[f64; 2]> {
        let a0 = self.angle_of(frame0);
        (0..frames)
            .map(|i| self.point(a0 + self.omega * i as f64, self.radius))
            .collect()
    }

    pub fn sample(&self, frames: usize, rng: &mut RngStream) -> Vec<f64> {
        let a0 = self.phase + self.phase_jitter * rng.normal();
        let r = self.radius * (1.0 + self.radius_jitter * rng.normal());
        let mut out = Vec::with_capacity(frames * 2);
        for i in 0..frames {
            let p = self.point(a0 + self.omega * i as f64, r);
            out.push(p[0] + self.frame_noise * rng.normal());
            out.push(p[1] + self.frame_noise * rng.normal());
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum TargetLaw {
    /// Mixture over the whole (flattened) state.
    Mixture(Mixture),
    /// Per-frame circular motion in the plane.
    Circle(CircleMotion),
}

#[derive(Debug, Clone)]
pub struct PromptSpec {
    pub id: usize,
    pub law: TargetLaw,
    /// Whether this prompt's clean data belongs to the fine-tuning subset.
    pub curated: bool,
}

/// A family of prompts over states of `frames x frame_dim` values.
#[derive(Debug, Clone)]
pub struct Task {
    pub name: String,
    pub frames: usize,
    pub frame_dim: usize,
    pub prompts: Vec<PromptSpec>,
    /// Broad law that corrupted pretraining samples come from.
    pub distractor: MvGaussian,
}

fn iso(mean: [f64; 2], var: f64) -> MvGaussian {
    MvGaussian::isotropic(mean.to_vec(), var).expect("positive variance")
}

impl Task {
    /// Four 2-D prompts with separated mixture targets. Prompt 3 is uncurated.
    pub fn point() -> Self {
        let m = |c: Vec<(f64, MvGaussian)>| TargetLaw::Mixture(Mixture::new(c).expect("valid mixture"));
        let pair = |a: [f64; 2], b: [f64; 2]| m(vec![(0.5, iso(a, 0.1)), (0.5, iso(b, 0.1))]);
        let prompts = vec![
            pair([1.2, 2.6], [2.6, 1.2]),
            pair([-1.2, 2.6], [-2.6, 1.2]),
            pair([-2.6, -1.2], [-1.2, -2.6]),
            pair([1.2, -2.6], [2.6, -1.2]),
        ];
        Self {
            name: "point".into(),
            frames: 1,
            frame_dim: 2,
            prompts: prompts
                .into_iter()
                .enumerate()
                .map(|(id, law)| PromptSpec { id, law, curated: id < 3 })
                .collect(),
            distractor: iso([0.0, 0.0], 9.0),
        }
    }

    /// Eight-frame planar motion on circles with prompt-specific speed.
    pub fn sequence() -> Self {
        let c = |center: [f64; 2], radius: f64, omega: f64, phase: f64| {
            TargetLaw::Circle(CircleMotion {
                center,
                radius,
                omega,
                phase,
                phase_jitter: 0.3,
                radius_jitter: 0.05,
                frame_noise: 0.03,
            })
        };
        let prompts = vec![
            c([0.0, 0.0], 1.0, 0.35, 0.0),
            c([0.0, 0.0], 1.0, -0.35, 1.5),
            c([0.0, 0.0], 0.6, 0.55, 3.0),
            c([0.0, 0.0], 0.8, -0.2, -1.6),
        ];
        Self {
            name: "sequence".into(),
            frames: 8,
            frame_dim: 2,
            prompts: prompts
                .into_iter()
                .enumerate()
                .map(|(id, law)| PromptSpec { id, law, curated: id < 3 })
                .collect(),
            distractor: MvGaussian::isotropic(vec![0.0; 16], 1.0).expect("positive"),
        }
    }

    /// One prompt with a correlated Gaussian over two 2-D frames.
    pub fn gaussian_control() -> Self {
        let cov = vec![
            0.30, 0.05, 0.12, 0.02, //
            0.05, 0.20, 0.02, 0.08, //
            0.12, 0.02, 0.30, 0.05, //
            0.02, 0.08, 0.05, 0.20,
        ];
        let g = MvGaussian::new(vec![0.8, -0.4, 1.0, -0.1], cov).expect("positive definite");
        Self {
            name: "gaussian".into(),
            frames: 2,
            frame_dim: 2,
            prompts: vec![PromptSpec {
                id: 0,
                law: TargetLaw::Mixture(Mixture::single(g)),
                curated: true,
            }],
            distractor: MvGaussian::isotropic(vec![0.0; 4], 4.0).expect("positive"),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "point" => Ok(Self::point()),
            "sequence" => Ok(Self::sequence()),
            "gaussian" => Ok(Self::gaussian_control()),
            other => Err(invalid(format!("unknown task {other:?}"))),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.frames * self.frame_dim
    }

    pub fn num_prompts(&self) -> usize {
        self.prompts.len()
    }

    pub fn prompt(&self, id: usize) -> Result<&PromptSpec> {
        self.prompts.get(id).ok_or(Error::UnknownPrompt(id))
    }

    pub fn sample_target(&self, id: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        Ok(self.sample_labeled(id, rng)?.0)
    }

    /// A target draw and, for mixtures, its component index.
    pub fn sample_labeled(&self, id: usize, rng: &mut RngStream) -> Result<(Vec<f64>, Option<usize>)> {
        Ok(match &self.prompt(id)?.law {
            TargetLaw::Mixture(m) => {
                let (x, k) = m.sample_labeled(rng);
                (x, Some(k))
            }
            TargetLaw::Circle(c) => (c.sample(self.frames, rng), None),
        })
    }

    /// Number of detail tokens: the largest component count over mixture prompts.
    pub fn num_details(&self) -> usize {
        self.prompts
            .iter()
            .map(|p| match &p.law {
                TargetLaw::Mixture(m) if m.components().len() > 1 => m.components().len(),
                _ => 0,
            })
            .max()
            .unwrap_or(0)
    }

    /// `n_per_prompt` samples for every prompt; each is replaced by a
    /// distractor draw with probability `corruption`.
    pub fn generate_dataset(&self, n_per_prompt: usize, corruption: f64, rng: &mut RngStream) -> Result<Dataset> {
        if !(0.0..=1.0).contains(&corruption) {
            return Err(invalid(format!("corruption fraction {corruption} outside [0, 1]")));
        }
        let mut ds = Dataset::new(self.state_dim());
        for p in &self.prompts {
            for _ in 0..n_per_prompt {
                let bad = rng.uniform() < corruption;
                if bad {
                    ds.push(&self.distractor.sample(rng), p.id, true, None);
                } else {
                    let (x, k) = self.sample_labeled(p.id, rng)?;
                    ds.push(&x, p.id, false, k);
                }
            }
        }
        Ok(ds)
    }

    /// Whether a generated sample counts as valid for its prompt.
    pub fn is_valid(&self, prompt: usize, x: &[f64]) -> Result<bool> {
        Ok(match &self.prompt(prompt)?.law {
            TargetLaw::Mixture(m) => m.min_mahalanobis(x) < 3.0,
            TargetLaw::Circle(c) => mean_path_deviation(c, x, self.frames) < 0.2,
        })
    }
}

/// Mean Euclidean distance between frames and the path anchored at frame 0.
pub fn mean_path_deviation(c: &CircleMotion, x: &[f64], frames: usize) -> f64 {
    let path = c.anchored_path(&x[0..2], frames);
    path.iter()
        .enumerate()
        .map(|(i, p)| ((x[2 * i] - p[0]).powi(2) + (x[2 * i + 1] - p[1]).powi(2)).sqrt())
        .sum::<f64>()
        / frames as f64
}

/// Fraction of samples that are valid for their prompt.
pub fn validity_rate(task: &Task, samples: &[Vec<f64>], prompts: &[usize]) -> Result<f64> {
    if samples.len() != prompts.len() {
        return Err(invalid("samples and prompts differ in length"));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0usize;
    for (x, &p) in samples.iter().zip(prompts) {
        ok += task.is_valid(p, x)? as usize;
    }
    Ok(ok as f64 / samples.len() as f64)
}

/// Samples `n` ODE draws per prompt from `field` and reports their validity.
pub fn model_validity(
    task: &Task,
    field: &dyn VelocityField,
    prompts: &[usize],
    n: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if n < 100 {
        return Err(invalid(format!("validity needs at least 100 samples per prompt, got {n}")));
    }
    let (ids, xs) = sample_per_prompt(field, prompts, n, schedule, seed, "validity")?;
    validity_rate(task, &xs, &ids)
}

/// `n` deterministic-sampler draws for each prompt, streams tagged by `tag`.
pub fn sample_per_prompt(
    field: &dyn VelocityField,
    prompts: &[usize],
    n: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    tag: &str,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let ids: Vec<usize> = prompts.iter().flat_map(|&p| std::iter::repeat_n(p, n)).collect();
    let specs = ids
        .iter()
        .enumerate()
        .map(|(i, &p)| PathSpec::new(p, SdeSteps::None, RngStream::derive(seed, tag, p as u64, i as u64)))
        .collect();
    let xs = sample_terminals(field, &Cond::Prompts(ids.clone()), schedule, specs)?;
    Ok((ids, xs))
}

/// Flat row-major training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub x: Vec<f64>,
    pub prompts: Vec<usize>,
    pub corrupted: Vec<bool>,
    /// Mixture component each clean sample came from.
    pub details: Vec<Option<usize>>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            x: Vec::new(),
            prompts: Vec::new(),
            corrupted: Vec::new(),
            details: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], prompt: usize, corrupted: bool, detail: Option<usize>) {
        debug_assert_eq!(x.len(), self.dim);
        self.x.extend_from_slice(x);
        self.prompts.push(prompt);
        self.corrupted.push(corrupted);
        self.details.push(detail);
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    /// Clean samples of curated prompts.
    pub fn curated(&self, task: &Task) -> Result<Dataset> {
        let mut out = Dataset::new(self.dim);
        for i in 0..self.len() {
            let p = self.prompts[i];
            if task.prompt(p)?.curated && !self.corrupted[i] {
                out.push(self.row(i), p, false, self.details[i]);
            }
        }
        if out.is_empty() {
            return Err(invalid("curated subset is empty"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowNetConfig {
    pub state_dim: usize,
    pub num_prompts: usize,
    pub num_details: usize,
    pub width: usize,
    pub depth: usize,
}

impl FlowNetConfig {
    pub fn for_task(task: &Task) -> Self {
        Self {
            state_dim: task.state_dim(),
            num_prompts: task.num_prompts(),
            num_details: task.num_details(),
            width: 64,
            depth: 2,
        }
    }
}

/// Velocity MLP over `[state, time features, prompt embedding]`.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub config: FlowNetConfig,
    pub params: ParamStore,
}

impl FlowNet {
    pub fn new(config: FlowNetConfig, rng: &mut RngStream) -> Self {
        let mut params = ParamStore::new();
        nn::init_table(&mut params, "emb.prompt", config.num_prompts, PROMPT_EMBED, 1.0, rng);
        if config.num_details > 0 {
            nn::init_table(&mut params, "emb.detail", config.num_details, PROMPT_EMBED, 1.0, rng);
        }
        let mut fan_in = config.state_dim + TIME_FEATURES + PROMPT_EMBED;
        for l in 0..config.depth {
            nn::init_dense(&mut params, &format!("l{l}"), fan_in, config.width, 1.0, rng);
            fan_in = config.width;
        }
        nn::init_dense(&mut params, "out", fan_in, config.state_dim, 0.5, rng);
        Self { config, params }
    }

    pub fn from_params(config: FlowNetConfig, params: ParamStore) -> Result<Self> {
        let net = Self { config, params };
        let emb = net.params.require("emb.prompt")?;
        if emb.shape() != [config.num_prompts, PROMPT_EMBED] {
            return Err(invalid(format!("prompt table has shape {:?}", emb.shape())));
        }
        let out = net.params.require("out.b")?;
        if out.len() != config.state_dim {
            return Err(invalid(format!(
                "output width {} but state dimension {}",
                out.len(),
                config.state_dim
            )));
        }
        Ok(net)
    }

    /// Learned embedding of one prompt.
    pub fn prompt_embedding(&self, prompt: usize) -> Result<Vec<f64>> {
        if prompt >= self.config.num_prompts {
            return Err(Error::UnknownPrompt(prompt));
        }
        let t = self.params.require("emb.prompt")?;
        Ok(t.values()[prompt * PROMPT_EMBED..(prompt + 1) * PROMPT_EMBED].to_vec())
    }

    /// Learned embedding of one detail token.
    pub fn detail_embedding(&self, detail: usize) -> Result<Vec<f64>> {
        if detail >= self.config.num_details {
            return Err(invalid(format!("unknown detail token {detail}")));
        }
        let t = self.params.require("emb.detail")?;
        Ok(t.values()[detail * PROMPT_EMBED..(detail + 1) * PROMPT_EMBED].to_vec())
    }

    fn prompt_rows(&self, g: &mut Graph, ids: &[usize], mode: Bind) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&p| p >= self.config.num_prompts) {
            return Err(Error::UnknownPrompt(bad));
        }
        let table = nn::bind(g, &self.params, "emb.prompt", mode)?;
        Ok(g.gather_rows(table, ids)?)
    }

    pub(crate) fn cond_var(&self, g: &mut Graph, cond: &Cond, mode: Bind) -> Result<Var> {
        match cond {
            Cond::Prompts(ids) => self.prompt_rows(g, ids, mode),
            Cond::Detailed { prompts, details } => {
                let base = self.prompt_rows(g, prompts, mode)?;
                if details.iter().all(Option::is_none) {
                    return Ok(base);
                }
                if let Some(bad) = details.iter().flatten().find(|&&d| d >= self.config.num_details) {
                    return Err(invalid(format!("unknown detail token {bad}")));
                }
                let table = nn::bind(g, &self.params, "emb.detail", mode)?;
                let idx: Vec<usize> = details.iter().map(|d| d.unwrap_or(0)).collect();
                let rows = g.gather_rows(table, &idx)?;
                let mask: Vec<f64> = details.iter().map(|d| d.is_some() as u8 as f64).collect();
                let mask = g.input(details.len(), 1, mask)?;
                let rows = g.mul_col(rows, mask)?;
                Ok(g.add(base, rows)?)
            }
            Cond::Embeddings { dim, values } => {
                if *dim != PROMPT_EMBED {
                    return Err(invalid(format!("conditioning width {dim}, expected {PROMPT_EMBED}")));
                }
                Ok(g.input(values.len() / dim, *dim, values.clone())?)
            }
        }
    }

    /// Velocity for a batch `x` (`B x D`) at per-row times `t`.
    pub fn forward(&self, g: &mut Graph, x: Var, t: &[f64], cond: &Cond, mode: Bind) -> Result<Var> {
        let (b, d) = g.dims(x);
        if d != self.config.state_dim || t.len() != b || cond.len() != b {
            return Err(invalid(format!(
                "flow net input {b}x{d} with {} times and {} conditioning rows",
                t.len(),
                cond.len()
            )));
        }
        let tf = g.input(b, TIME_FEATURES, nn::time_features(t))?;
        let c = self.cond_var(g, cond, mode)?;
        let mut h = g.concat_cols(&[x, tf, c])?;
        for l in 0..self.config.depth {
            h = nn::dense(g, &self.params, &format!("l{l}"), h, mode)?;
            h = g.silu(h);
        }
        nn::dense(g, &self.params, "out", h, mode)
    }
}

impl VelocityField for FlowNet {
    fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    fn velocity(&self, x: &[f64], t: &[f64], cond: &Cond) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let xv = g.input(t.len(), self.config.state_dim, x.to_vec())?;
        let v = self.forward(&mut g, xv, t, cond, Bind::Frozen)?;
        Ok(g.value(v).to_vec())
    }
}

/// Builds `mean |v(x_t, t, c) - (eps - x0)|^2` (per-sample squared norm,
/// averaged over the batch) for explicit `t` and `eps`.
pub fn flow_matching_loss_with(
    net: &FlowNet,
    g: &mut Graph,
    x0: &[f64],
    cond: &Cond,
    t: &[f64],
    eps: &[f64],
    mode: Bind,
) -> Result<Var> {
    let d = net.config.state_dim;
    let b = t.len();
    if b == 0 {
        return Err(invalid("flow-matching batch is empty"));
    }
    if x0.len() != b * d || eps.len() != b * d {
        return Err(invalid("flow-matching batch has inconsistent sizes"));
    }
    let mut xt = Vec::with_capacity(b * d);
    let mut target = Vec::with_capacity(b * d);
    for i in 0..b {
        for j in 0..d {
            let (x, e) = (x0[i * d + j], eps[i * d + j]);
            xt.push((1.0 - t[i]) * x + t[i] * e);
            target.push(e - x);
        }
    }
    let xv = g.input(b, d, xt)?;
    let v = net.forward(g, xv, t, cond, mode)?;
    let target = g.input(b, d, target)?;
    let diff = g.sub(v, target)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Flow-matching loss with `t ~ U(0, 1)` and `eps ~ N(0, I)` drawn from `rng`.
pub fn flow_matching_loss(net: &FlowNet, g: &mut Graph, x0: &[f64], cond: &Cond, rng: &mut RngStream) -> Result<Var> {
    let b = cond.len();
    let t: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
    let eps = rng.gaussian(b * net.config.state_dim);
    flow_matching_loss_with(net, g, x0, cond, &t, &eps, Bind::Train)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    /// Probability that a clean sample is conditioned on its detail token too.
    pub detail_rate: f64,
}

/// Trains `net` on `data` by flow matching; `on_step(step, loss, grad_norm)`
/// sees every step.
pub fn fit_flow_matching(
    net: &mut FlowNet,
    data: &Dataset,
    cfg: &FitConfig,
    rng: &mut RngStream,
    stage: &'static str,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let d = data.dim;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(data.len())).collect();
        let mut x0 = Vec::with_capacity(cfg.batch * d);
        for &i in &idx {
            x0.extend_from_slice(data.row(i));
        }
        let prompts: Vec<usize> = idx.iter().map(|&i| data.prompts[i]).collect();
        let cond = if net.config.num_details > 0 {
            let details = idx
                .iter()
                .map(|&i| data.details[i].filter(|_| rng.uniform() < cfg.detail_rate))
                .collect();
            Cond::Detailed { prompts, details }
        } else {
            Cond::Prompts(prompts)
        };
        let mut g = Graph::new();
        let loss = flow_matching_loss(net, &mut g, &x0, &cond, rng)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage,
                what: "loss",
                iteration: step,
            });
        }
        g.backward(loss, &mut net.params)?;
        let norm = net.params.clip_grad_norm(cfg.grad_clip);
        adam.step(&mut net.params)?;
        if step % 500 == 0 {
            debug!(stage, step, loss = value, "flow matching");
        }
        on_step(step, value, norm);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_mixture_samples_are_valid_at_the_three_sigma_rate() {
        let task = Task::point();
        let mut rng = RngStream::derive(3, "validity", 0, 0);
        let mut xs = Vec::new();
        let mut ids = Vec::new();
        for p in 0..4 {
            for _ in 0..5000 {
                xs.push(task.sample_target(p, &mut rng).unwrap());
                ids.push(p);
            }
        }
        let rate = validity_rate(&task, &xs, &ids).unwrap();
        // chi-square with 2 dof: P(r^2 < 9) = 1 - exp(-4.5)
        assert!((rate - (1.0 - (-4.5f64).exp())).abs() < 0.01, "{rate}");
        assert!((rate - 0.97).abs() <= 0.02);

        let far: Vec<Vec<f64>> = (0..200).map(|_| vec![40.0 + rng.normal(), 40.0]).collect();
        assert_eq!(validity_rate(&task, &far, &[0; 200]).unwrap(), 0.0);
    }

    #[test]
    fn perfect_regression_has_zero_loss() {
        // a net whose output layer is zero, trained against eps - x0 = 0
        let task = Task::point();
        let mut net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::derive(1, "init", 0, 0));
        for (name, t) in net.params.iter_mut() {
            if name.starts_with("out") {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new();
        let x0 = vec![0.5, -0.5, 1.0, 2.0];
        let loss = flow_matching_loss_with(
            &net,
            &mut g,
            &x0,
            &Cond::Prompts(vec![0, 1]),
            &[0.3, 0.9],
            &x0,
            Bind::Frozen,
        )
        .unwrap();
        assert_eq!(g.scalar(loss), 0.0);
        assert!(flow_matching_loss_with(&net, &mut g, &[], &Cond::Prompts(vec![]), &[], &[], Bind::Frozen).is_err());
    }

    #[test]
    fn curated_subset_drops_outliers_and_uncurated_prompts() {
        let task = Task::point();
        let ds = task
            .generate_dataset(200, 0.2, &mut RngStream::derive(4, "data", 0, 0))
            .unwrap();
        assert_eq!(ds.len(), 800);
        let frac = ds.corrupted.iter().filter(|&&c| c).count() as f64 / 800.0;
        assert!((frac - 0.2).abs() < 0.05);
        let cur = ds.curated(&task).unwrap();
        assert!(cur.prompts.iter().all(|&p| p < 3));
        assert!(cur.corrupted.iter().all(|&c| !c));
    }

    #[test]
    fn circle_samples_follow_their_path() {
        let task = Task::sequence();
        let mut rng = RngStream::derive(5, "seq", 0, 0);
        for p in 0..4 {
            let TargetLaw::Circle(c) = &task.prompt(p).unwrap().law else { unreachable!() };
            let mut dev = 0.0;
            for _ in 0..200 {
                let x = task.sample_target(p, &mut rng).unwrap();
                dev += mean_path_deviation(c, &x, 8) / 200.0;
            }
            assert!(dev < 0.12, "prompt {p}: {dev}");
        }
    }

    #[test]
    fn unknown_prompt_is_rejected() {
        let task = Task::point();
        assert!(matches!(task.prompt(9), Err(Error::UnknownPrompt(9))));
        let net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::derive(1, "init", 0, 0));
        assert!(net.velocity(&[0.0, 0.0], &[0.5], &Cond::Prompts(vec![7])).is_err());
    }
}
