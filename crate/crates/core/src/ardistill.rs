//! Few-step and autoregressive distillation of a frozen flow model.
//!
//! The student denoises one frame at a time in `k` Euler steps. Each frame
//! sees a context made of other frames: every frame's current state in
//! bidirectional mode, or the already generated earlier frames in
//! block-causal mode. Causality therefore follows from what the context is
//! built from, and [`causality_probe`] checks it bit for bit.

use diffcore::{Adam, AdamConfig, Graph, ParamStore, RngStream, Var};
use tracing::debug;

use crate::error::{invalid, Error, Result};
use crate::flowsde::{sample_paths, Cond, NoiseSchedule, PathSpec, SdeSteps, VelocityField};
use crate::genmodel::{flow_matching_loss, FlowNet, Task, TargetLaw, PROMPT_EMBED};
use crate::nn::{self, Bind, TIME_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Bidirectional,
    BlockCausal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentConfig {
    pub frames: usize,
    pub frame_dim: usize,
    pub num_prompts: usize,
    /// Denoising steps per frame.
    pub steps: usize,
    pub width: usize,
    pub depth: usize,
    pub mode: MaskMode,
}

impl StudentConfig {
    pub fn for_task(task: &Task, mode: MaskMode) -> Self {
        Self {
            frames: task.frames,
            frame_dim: task.frame_dim,
            num_prompts: task.num_prompts(),
            steps: 4,
            width: 64,
            depth: 2,
            mode,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.frames * self.frame_dim
    }

    fn input_width(&self) -> usize {
        self.frame_dim + self.state_dim() + self.frames + 2 * PROMPT_EMBED + TIME_FEATURES
    }

    fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.frame_dim == 0 || self.steps == 0 || self.num_prompts == 0 {
            return Err(invalid("student needs frames, a frame size, prompts and at least one step"));
        }
        Ok(())
    }
}

/// Previously generated frames of the current rollout.
#[derive(Debug, Clone)]
pub struct FrameCache<T> {
    frames: Vec<T>,
    limit: usize,
}

impl<T> FrameCache<T> {
    /// Cache for a rollout of `frames` frames; it never holds all of them.
    pub fn new(frames: usize) -> Self {
        Self {
            frames: Vec::with_capacity(frames),
            limit: frames,
        }
    }

    pub fn push(&mut self, frame: T) -> Result<()> {
        if self.frames.len() + 1 >= self.limit {
            return Err(invalid(format!("frame cache full at {} of {} frames", self.frames.len(), self.limit)));
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[T] {
        &self.frames
    }
}

#[derive(Debug, Clone)]
pub struct StudentGenerator {
    pub config: StudentConfig,
    pub params: ParamStore,
}

impl StudentGenerator {
    pub fn new(config: StudentConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        nn::init_table(&mut params, "st.emb", config.num_prompts, PROMPT_EMBED, 1.0, rng);
        nn::init_table(&mut params, "st.frame", config.frames, PROMPT_EMBED, 1.0, rng);
        let mut fan_in = config.input_width();
        for l in 0..config.depth {
            nn::init_dense(&mut params, &format!("st.l{l}"), fan_in, config.width, 1.0, rng);
            fan_in = config.width;
        }
        nn::init_dense(&mut params, "st.out", fan_in, config.frame_dim, 0.1, rng);
        Ok(Self { config, params })
    }

    /// A student in `mode` that starts from this one's weights wherever
    /// shapes agree and from fresh initialization elsewhere.
    pub fn derive_student(&self, mode: MaskMode, rng: &mut RngStream) -> Result<Self> {
        let mut s = Self::new(StudentConfig { mode, ..self.config }, rng)?;
        s.params.copy_matching_from(&self.params);
        Ok(s)
    }

    fn check_batch(&self, prompts: &[usize], eps: &[f64]) -> Result<()> {
        if let Some(&p) = prompts.iter().find(|&&p| p >= self.config.num_prompts) {
            return Err(Error::UnknownPrompt(p));
        }
        if eps.len() != prompts.len() * self.config.state_dim() {
            return Err(invalid(format!(
                "noise has {} values for {} samples of size {}",
                eps.len(),
                prompts.len(),
                self.config.state_dim()
            )));
        }
        Ok(())
    }

    /// Velocity of frame rows. `ctx` is `R x (F d)`, `mask` is `R x F`.
    #[allow(clippy::too_many_arguments)]
    fn velocity(
        &self,
        g: &mut Graph,
        x: Var,
        ctx: Var,
        mask: Var,
        frame_idx: &[usize],
        prompts: &[usize],
        t: f64,
        bind: Bind,
    ) -> Result<Var> {
        let r = prompts.len();
        let emb = nn::bind(g, &self.params, "st.emb", bind)?;
        let emb = g.gather_rows(emb, prompts)?;
        let fe = nn::bind(g, &self.params, "st.frame", bind)?;
        let fe = g.gather_rows(fe, frame_idx)?;
        let tf = g.input(r, TIME_FEATURES, nn::time_features(&vec![t; r]))?;
        let mut h = g.concat_cols(&[x, ctx, mask, fe, emb, tf])?;
        for l in 0..self.config.depth {
            h = nn::dense(g, &self.params, &format!("st.l{l}"), h, bind)?;
            h = g.silu(h);
        }
        nn::dense(g, &self.params, "st.out", h, bind)
    }

    /// `k` Euler steps from `x` at t = 1 down to t = 0 with a fixed context.
    #[allow(clippy::too_many_arguments)]
    fn denoise(
        &self,
        g: &mut Graph,
        mut x: Var,
        ctx: Var,
        mask: Var,
        frame_idx: &[usize],
        prompts: &[usize],
        bind: Bind,
    ) -> Result<Var> {
        let k = self.config.steps;
        let dt = 1.0 / k as f64;
        for s in 0..k {
            let t = 1.0 - s as f64 * dt;
            let v = self.velocity(g, x, ctx, mask, frame_idx, prompts, t, bind)?;
            let step = g.scale(v, dt);
            x = g.sub(x, step)?;
        }
        Ok(x)
    }

    fn frame_noise(&self, g: &mut Graph, eps: &[f64], b: usize, i: usize) -> Result<Var> {
        let (f, d) = (self.config.frames, self.config.frame_dim);
        let mut v = Vec::with_capacity(b * d);
        for row in 0..b {
            v.extend_from_slice(&eps[row * f * d + i * d..row * f * d + (i + 1) * d]);
        }
        Ok(g.input(b, d, v)?)
    }

    /// Context for frame `i` from cached frame nodes plus zero padding.
    fn causal_context(&self, g: &mut Graph, cache: &FrameCache<Var>, b: usize) -> Result<(Var, Var)> {
        let (f, d) = (self.config.frames, self.config.frame_dim);
        let i = cache.len();
        let mut parts: Vec<Var> = cache.frames().to_vec();
        if i < f {
            parts.push(g.input(b, (f - i) * d, vec![0.0; b * (f - i) * d])?);
        }
        let ctx = g.concat_cols(&parts)?;
        let mut m = Vec::with_capacity(b * f);
        for _ in 0..b {
            m.extend((0..f).map(|j| (j < i) as u8 as f64));
        }
        let mask = g.input(b, f, m)?;
        Ok((ctx, mask))
    }

    /// Generates `B x (F d)` samples in the graph; gradients reach the
    /// student when `bind` is `Train`.
    pub fn generate_graph(&self, g: &mut Graph, prompts: &[usize], eps: &[f64], bind: Bind) -> Result<Var> {
        self.check_batch(prompts, eps)?;
        let b = prompts.len();
        let f = self.config.frames;
        match self.config.mode {
            MaskMode::Bidirectional => {
                let mut xs: Vec<Var> = (0..f).map(|i| self.frame_noise(g, eps, b, i)).collect::<Result<_>>()?;
                let mask = g.input(b, f, vec![1.0; b * f])?;
                let k = self.config.steps;
                let dt = 1.0 / k as f64;
                for s in 0..k {
                    let t = 1.0 - s as f64 * dt;
                    let ctx = g.concat_cols(&xs)?;
                    let mut next = Vec::with_capacity(f);
                    for (i, &x) in xs.iter().enumerate() {
                        let v = self.velocity(g, x, ctx, mask, &vec![i; b], prompts, t, bind)?;
                        let step = g.scale(v, dt);
                        next.push(g.sub(x, step)?);
                    }
                    xs = next;
                }
                Ok(g.concat_cols(&xs)?)
            }
            MaskMode::BlockCausal => {
                let mut cache = FrameCache::new(f);
                let mut out = Vec::with_capacity(f);
                for i in 0..f {
                    let (ctx, mask) = self.causal_context(g, &cache, b)?;
                    let x = self.frame_noise(g, eps, b, i)?;
                    let frame = self.denoise(g, x, ctx, mask, &vec![i; b], prompts, bind)?;
                    out.push(frame);
                    if i + 1 < f {
                        cache.push(frame)?;
                    }
                }
                Ok(g.concat_cols(&out)?)
            }
        }
    }

    pub fn generate(&self, prompts: &[usize], eps: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = self.generate_graph(&mut g, prompts, eps, Bind::Frozen)?;
        Ok(g.value(x).to_vec())
    }

    /// Every frame at once, each conditioned on `history`'s earlier frames.
    /// Returns `(B F) x d` rows ordered sample-major.
    pub fn teacher_forced_graph(
        &self,
        g: &mut Graph,
        prompts: &[usize],
        eps: &[f64],
        history: &[f64],
        bind: Bind,
    ) -> Result<Var> {
        if self.config.mode != MaskMode::BlockCausal {
            return Err(invalid("teacher forcing needs a block-causal student"));
        }
        self.check_batch(prompts, eps)?;
        if history.len() != eps.len() {
            return Err(invalid("history and noise differ in size"));
        }
        let (f, d) = (self.config.frames, self.config.frame_dim);
        let b = prompts.len();
        let mut x = Vec::with_capacity(b * f * d);
        let mut ctx = Vec::with_capacity(b * f * f * d);
        let mut mask = Vec::with_capacity(b * f * f);
        let mut frame_idx = Vec::with_capacity(b * f);
        let mut rows_prompt = Vec::with_capacity(b * f);
        for (row, &p) in prompts.iter().enumerate() {
            let h = &history[row * f * d..(row + 1) * f * d];
            for i in 0..f {
                x.extend_from_slice(&eps[row * f * d + i * d..row * f * d + (i + 1) * d]);
                ctx.extend_from_slice(&h[..i * d]);
                ctx.extend(std::iter::repeat_n(0.0, (f - i) * d));
                mask.extend((0..f).map(|j| (j < i) as u8 as f64));
                frame_idx.push(i);
                rows_prompt.push(p);
            }
        }
        let r = b * f;
        let x = g.input(r, d, x)?;
        let ctx = g.input(r, f * d, ctx)?;
        let mask = g.input(r, f, mask)?;
        self.denoise(g, x, ctx, mask, &frame_idx, &rows_prompt, bind)
    }
}

/// Autoregressive generation of one sequence with noise from `stream`.
pub fn self_forcing_rollout(student: &StudentGenerator, prompt: usize, stream: &mut RngStream) -> Result<Vec<f64>> {
    if student.config.mode != MaskMode::BlockCausal {
        return Err(invalid("self-forcing rollouts need a block-causal student"));
    }
    let eps = stream.gaussian(student.config.state_dim());
    student.generate(&[prompt], &eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub perturbed: usize,
    /// Frames before the perturbed one stayed bit-identical.
    pub prefix_unchanged: bool,
    /// The perturbed frame itself moved.
    pub frame_changed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub results: Vec<ProbeResult>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.prefix_unchanged)
    }
}

/// Perturbs each frame's noise in turn and checks that earlier frames do not move.
pub fn causality_probe(student: &StudentGenerator, prompt: usize, seed: u64) -> Result<ProbeReport> {
    let (f, d) = (student.config.frames, student.config.frame_dim);
    let eps = RngStream::derive(seed, "probe", prompt as u64, 0).gaussian(f * d);
    let base = student.generate(&[prompt], &eps)?;
    let mut results = Vec::with_capacity(f);
    for j in 0..f {
        let mut e = eps.clone();
        for v in &mut e[j * d..(j + 1) * d] {
            *v += 1.0;
        }
        let out = student.generate(&[prompt], &e)?;
        results.push(ProbeResult {
            perturbed: j,
            prefix_unchanged: out[..j * d] == base[..j * d],
            frame_changed: out[j * d..(j + 1) * d] != base[j * d..(j + 1) * d],
        });
    }
    Ok(ProbeReport { results })
}

/// Score of a rectified flow from its velocity: `-(x + (1 - t) v) / t`.
pub fn score_from_velocity(x: &[f64], v: &[f64], t: &[f64]) -> Vec<f64> {
    let d = x.len() / t.len().max(1);
    x.iter()
        .zip(v)
        .enumerate()
        .map(|(i, (x, v))| {
            let t = t[i / d];
            -(x + (1.0 - t) * v) / t
        })
        .collect()
}

/// Noise level and forward noise for one distribution-matching step.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdBatch {
    pub prompts: Vec<usize>,
    pub t: Vec<f64>,
    pub noise: Vec<f64>,
}

impl DmdBatch {
    /// Times drawn uniformly from the schedule's interior grid points at or
    /// above `t_floor`.
    pub fn draw(prompts: Vec<usize>, dim: usize, schedule: &NoiseSchedule, t_floor: f64, rng: &mut RngStream) -> Result<Self> {
        let grid: Vec<f64> = schedule
            .eligible_indices()
            .into_iter()
            .map(|k| schedule.time(k))
            .filter(|&t| t >= t_floor - 1e-12)
            .collect();
        if grid.is_empty() {
            return Err(invalid(format!("no grid time at or above {t_floor}")));
        }
        let t = prompts.iter().map(|_| grid[rng.below(grid.len())]).collect();
        let noise = rng.gaussian(prompts.len() * dim);
        Ok(Self { prompts, t, noise })
    }

    /// `(1 - t) x + t noise`, row by row.
    pub fn diffuse(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len() / self.t.len();
        x.iter()
            .zip(&self.noise)
            .enumerate()
            .map(|(i, (x, e))| (1.0 - self.t[i / d]) * x + self.t[i / d] * e)
            .collect()
    }
}

/// `s_gen - s_data` at the diffused generator samples.
pub fn dmd_signal(
    x_gen: &[f64],
    batch: &DmdBatch,
    teacher: &dyn VelocityField,
    fake: &dyn VelocityField,
) -> Result<Vec<f64>> {
    let d = teacher.state_dim();
    if fake.state_dim() != d {
        return Err(invalid(format!(
            "teacher works on {d} dimensions but the fake score on {}",
            fake.state_dim()
        )));
    }
    if x_gen.len() != batch.t.len() * d || batch.noise.len() != x_gen.len() {
        return Err(invalid("generator batch does not match the score networks"));
    }
    let xt = batch.diffuse(x_gen);
    let cond = Cond::Prompts(batch.prompts.clone());
    let vd = teacher.velocity(&xt, &batch.t, &cond)?;
    let vg = fake.velocity(&xt, &batch.t, &cond)?;
    let sd = score_from_velocity(&xt, &vd, &batch.t);
    let sg = score_from_velocity(&xt, &vg, &batch.t);
    Ok(sg.iter().zip(&sd).map(|(a, b)| a - b).collect())
}

/// `mean_b <signal_b, (1 - t_b) x_b + t_b noise_b>` with `signal` constant.
/// Its gradient is the distribution-matching gradient.
pub fn dmd_objective(g: &mut Graph, x_gen: Var, batch: &DmdBatch, signal: &[f64]) -> Result<Var> {
    let (b, d) = g.dims(x_gen);
    if signal.len() != b * d || batch.t.len() != b {
        return Err(invalid("signal does not match the generator batch"));
    }
    let keep = g.input(b, 1, batch.t.iter().map(|t| 1.0 - t).collect())?;
    let scaled = g.mul_col(x_gen, keep)?;
    let shift: Vec<f64> = batch.noise.iter().enumerate().map(|(i, e)| batch.t[i / d] * e).collect();
    let shift = g.input(b, d, shift)?;
    let xt = g.add(scaled, shift)?;
    let sig = g.input(b, d, signal.to_vec())?;
    let inner = g.mul(sig, xt);
    let total = g.sum(inner);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Sets the student's gradients to the distribution-matching gradient for
/// one batch and returns the pseudo-objective value.
pub fn dmd_grad(
    student: &mut StudentGenerator,
    teacher: &dyn VelocityField,
    fake: &dyn VelocityField,
    eps: &[f64],
    batch: &DmdBatch,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = student.generate_graph(&mut g, &batch.prompts, eps, Bind::Train)?;
    let signal = dmd_signal(g.value(x), batch, teacher, fake)?;
    let obj = dmd_objective(&mut g, x, batch, &signal)?;
    g.backward(obj, &mut student.params)?;
    Ok(g.scalar(obj))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub fake_lr: f64,
    /// Fake-score updates per generator update.
    pub fake_updates: usize,
    pub grad_clip: f64,
    /// Smallest noise level used for the matching signal. Score errors of a
    /// learned teacher are amplified by `1 / t` near the data end, but
    /// concentrated laws only show their fine structure there.
    pub t_floor: f64,
    /// The generator's learning rate decays linearly to `lr * final_lr_scale`.
    pub final_lr_scale: f64,
    pub prompts: Vec<usize>,
}

impl Default for DmdConfig {
    fn default() -> Self {
        Self {
            iterations: 400,
            batch: 64,
            lr: 3e-4,
            fake_lr: 3e-3,
            fake_updates: 5,
            grad_clip: 1.0,
            t_floor: 0.04,
            final_lr_scale: 0.1,
            prompts: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmdStats {
    pub iteration: usize,
    pub objective: f64,
    pub fake_loss: f64,
    pub fake_updates: usize,
    pub grad_norm: f64,
}

fn batch_prompts(prompts: &[usize], n: usize, offset: usize) -> Vec<usize> {
    (0..n).map(|i| prompts[(offset + i) % prompts.len()]).collect()
}

/// Alternates fake-score flow matching on student samples with
/// distribution-matching steps on the student.
pub fn dmd_train(
    student: &mut StudentGenerator,
    teacher: &dyn VelocityField,
    fake: &mut FlowNet,
    cfg: &DmdConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    stage: &'static str,
    mut on_iter: impl FnMut(&DmdStats),
) -> Result<()> {
    let d = student.config.state_dim();
    if teacher.state_dim() != d || fake.config.state_dim != d {
        return Err(invalid("teacher, fake score and student disagree on the state size"));
    }
    if cfg.prompts.is_empty() || cfg.batch == 0 {
        return Err(invalid("distillation needs prompts and a nonempty batch"));
    }
    let mut gen_adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut fake_adam = Adam::new(AdamConfig::with_lr(cfg.fake_lr));
    let mut rng = RngStream::derive(seed, stage, 0, 0);
    for it in 0..cfg.iterations {
        let mut fake_loss = 0.0;
        for u in 0..cfg.fake_updates {
            let prompts = batch_prompts(&cfg.prompts, cfg.batch, it + u);
            let eps = rng.gaussian(cfg.batch * d);
            let x = student.generate(&prompts, &eps)?;
            let mut g = Graph::new();
            let loss = flow_matching_loss(fake, &mut g, &x, &Cond::Prompts(prompts), &mut rng)?;
            fake_loss = g.scalar(loss);
            g.backward(loss, &mut fake.params)?;
            fake.params.clip_grad_norm(5.0);
            fake_adam.step(&mut fake.params)?;
        }
        let prompts = batch_prompts(&cfg.prompts, cfg.batch, it);
        let eps = rng.gaussian(cfg.batch * d);
        let batch = DmdBatch::draw(prompts, d, schedule, cfg.t_floor, &mut rng)?;
        let objective = dmd_grad(student, teacher, fake, &eps, &batch)?;
        if !objective.is_finite() || !fake_loss.is_finite() {
            return Err(Error::NonFinite {
                stage,
                what: "distribution-matching objective",
                iteration: it,
            });
        }
        let grad_norm = student.params.clip_grad_norm(cfg.grad_clip);
        let frac = it as f64 / cfg.iterations.max(1) as f64;
        gen_adam.config.lr = cfg.lr * (1.0 - frac * (1.0 - cfg.final_lr_scale));
        gen_adam.step(&mut student.params)?;
        let stats = DmdStats {
            iteration: it,
            objective,
            fake_loss,
            fake_updates: cfg.fake_updates,
            grad_norm,
        };
        if it % 50 == 0 {
            debug!(stage, it, fake_loss, grad_norm, "distribution matching");
        }
        on_iter(&stats);
    }
    Ok(())
}

/// Few-step student distilled from the teacher with any mask mode.
pub fn stage1_dmd(
    student: &mut StudentGenerator,
    teacher: &FlowNet,
    fake: &mut FlowNet,
    cfg: &DmdConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    on_iter: impl FnMut(&DmdStats),
) -> Result<()> {
    dmd_train(student, teacher, fake, cfg, schedule, seed, "distill-dmd", on_iter)
}

/// Teacher endpoints with the noise that started them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub dim: usize,
    pub prompts: Vec<usize>,
    pub noise: Vec<f64>,
    pub samples: Vec<f64>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// `n` deterministic teacher samples, cycling through `prompts`. Pair `i`
/// uses the stream `(seed, tag, prompt, i)`.
pub fn collect_ode_pairs(
    teacher: &FlowNet,
    prompts: &[usize],
    n: usize,
    schedule: &NoiseSchedule,
    seed: u64,
    tag: &str,
) -> Result<PairDataset> {
    if prompts.is_empty() {
        return Err(invalid("no prompts to collect pairs for"));
    }
    let ids = batch_prompts(prompts, n, 0);
    let specs = ids
        .iter()
        .enumerate()
        .map(|(i, &p)| PathSpec::new(p, SdeSteps::None, RngStream::derive(seed, tag, p as u64, i as u64)))
        .collect();
    let paths = sample_paths(teacher, &Cond::Prompts(ids.clone()), schedule, specs)?;
    let mut noise = Vec::with_capacity(n * teacher.config.state_dim);
    let mut samples = Vec::with_capacity(n * teacher.config.state_dim);
    for p in &paths {
        noise.extend_from_slice(&p.states[0]);
        samples.extend_from_slice(p.terminal());
    }
    Ok(PairDataset {
        dim: teacher.config.state_dim,
        prompts: ids,
        noise,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 64,
            lr: 1e-3,
            grad_clip: 1.0,
        }
    }
}

/// Mean squared error of teacher-forced frames against the teacher's
/// frames, averaged over every frame of every pair in `idx`.
fn regression_loss(student: &StudentGenerator, g: &mut Graph, pairs: &PairDataset, idx: &[usize], bind: Bind) -> Result<Var> {
    let d = pairs.dim;
    let mut prompts = Vec::with_capacity(idx.len());
    let mut eps = Vec::with_capacity(idx.len() * d);
    let mut target = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        prompts.push(pairs.prompts[i]);
        eps.extend_from_slice(&pairs.noise[i * d..(i + 1) * d]);
        target.extend_from_slice(&pairs.samples[i * d..(i + 1) * d]);
    }
    let out = student.teacher_forced_graph(g, &prompts, &eps, &target, bind)?;
    let (r, c) = g.dims(out);
    let target = g.input(r, c, target)?;
    let diff = g.sub(out, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Regression loss over the whole pair set, without gradients.
pub fn pair_regression_loss(student: &StudentGenerator, pairs: &PairDataset) -> Result<f64> {
    let mut g = Graph::new();
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let l = regression_loss(student, &mut g, pairs, &idx, Bind::Frozen)?;
    Ok(g.scalar(l))
}

/// Teacher-forced regression of a block-causal student onto teacher frames.
pub fn stage2_causal_regression(
    student: &mut StudentGenerator,
    pairs: &PairDataset,
    cfg: &RegressionConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64, f64),
) -> Result<()> {
    if student.config.mode != MaskMode::BlockCausal {
        return Err(invalid("causal regression needs a block-causal student"));
    }
    if pairs.dim != student.config.state_dim() {
        return Err(invalid("pair dimension does not match the student"));
    }
    if pairs.is_empty() {
        return Err(invalid("pair dataset is empty"));
    }
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = RngStream::derive(seed, "distill-regress", 0, 0);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(pairs.len())).collect();
        let mut g = Graph::new();
        let loss = regression_loss(student, &mut g, pairs, &idx, Bind::Train)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "distill-regress",
                what: "loss",
                iteration: step,
            });
        }
        g.backward(loss, &mut student.params)?;
        let norm = student.params.clip_grad_norm(cfg.grad_clip);
        adam.step(&mut student.params)?;
        on_step(step, value, norm);
    }
    Ok(())
}

/// Distribution matching on whole self-generated rollouts.
pub fn stage3_self_forcing(
    student: &mut StudentGenerator,
    teacher: &FlowNet,
    fake: &mut FlowNet,
    cfg: &DmdConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    on_iter: impl FnMut(&DmdStats),
) -> Result<()> {
    if student.config.mode != MaskMode::BlockCausal {
        return Err(invalid("self forcing needs a block-causal student"));
    }
    dmd_train(student, teacher, fake, cfg, schedule, seed, "distill-self-forcing", on_iter)
}

/// Mean distance of each frame from the noise-free path anchored at frame 0.
pub fn frame_errors(task: &Task, prompts: &[usize], xs: &[f64]) -> Result<Vec<f64>> {
    let (f, d) = (task.frames, task.frame_dim);
    if d != 2 || xs.len() != prompts.len() * f * d || prompts.is_empty() {
        return Err(invalid("frame errors need planar frames, one sample per prompt"));
    }
    let mut err = vec![0.0; f];
    for (row, &p) in prompts.iter().enumerate() {
        let c = match &task.prompt(p)?.law {
            TargetLaw::Circle(c) => c,
            TargetLaw::Mixture(_) => return Err(invalid("frame errors need motion prompts")),
        };
        let x = &xs[row * f * d..(row + 1) * f * d];
        for (i, q) in c.anchored_path(&x[..2], f).iter().enumerate() {
            err[i] += ((x[2 * i] - q[0]).powi(2) + (x[2 * i + 1] - q[1]).powi(2)).sqrt();
        }
    }
    Ok(err.into_iter().map(|e| e / prompts.len() as f64).collect())
}

/// Least-squares slope of `values` against their index.
pub fn growth_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn student(mode: MaskMode) -> StudentGenerator {
        let task = Task::sequence();
        StudentGenerator::new(StudentConfig::for_task(&task, mode), &mut RngStream::derive(1, "st", 0, 0)).unwrap()
    }

    #[test]
    fn cache_refuses_to_fill() {
        let mut c = FrameCache::new(3);
        c.push(1).unwrap();
        c.push(2).unwrap();
        assert!(c.push(3).is_err());
        assert_eq!(c.frames(), &[1, 2]);
    }

    #[test]
    fn causal_student_passes_probe_and_bidirectional_fails() {
        let r = causality_probe(&student(MaskMode::BlockCausal), 0, 3).unwrap();
        assert!(r.passed());
        assert!(r.results[0].frame_changed);
        assert!(r.results.iter().all(|x| x.frame_changed));
        let r = causality_probe(&student(MaskMode::Bidirectional), 0, 3).unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn rollout_matches_teacher_forcing_on_own_history() {
        let s = student(MaskMode::BlockCausal);
        let mut a = RngStream::derive(5, "roll", 0, 0);
        let x = self_forcing_rollout(&s, 1, &mut a).unwrap();
        let y = self_forcing_rollout(&s, 1, &mut RngStream::derive(5, "roll", 0, 0)).unwrap();
        assert_eq!(x, y);
        let eps = RngStream::derive(5, "roll", 0, 0).gaussian(16);
        let mut g = Graph::new();
        let tf = s.teacher_forced_graph(&mut g, &[1], &eps, &x, Bind::Frozen).unwrap();
        assert_eq!(g.value(tf), x.as_slice());
    }

    #[test]
    fn slope_of_a_line() {
        assert!((growth_slope(&[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(growth_slope(&[4.0]), 0.0);
    }

    #[test]
    fn score_identity() {
        // v = eps - x0 with x = (1 - t) x0 + t eps gives score -eps / t
        let (x0, eps, t) = (0.3, -1.1, 0.4);
        let x = (1.0 - t) * x0 + t * eps;
        let s = score_from_velocity(&[x], &[eps - x0], &[t]);
        assert!((s[0] + eps / t).abs() < 1e-12);
    }
}
