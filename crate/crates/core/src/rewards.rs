//! Terminal rewards: four analytic components, their weighted aggregate, a
//! learned preference model, and the paired Good/Same/Bad comparison.

use std::f64::consts::PI;

use diffcore::{Adam, AdamConfig, Graph, ParamStore, RngStream, Var};

use crate::error::{invalid, Error, Result};
use crate::genmodel::{mean_path_deviation, CircleMotion, TargetLaw, Task};
use crate::nn::{self, Bind};

/// Component order everywhere in this module: alignment, video aesthetic,
/// image aesthetic, motion.
pub const COMPONENTS: [&str; 4] = ["alignment", "video", "image", "motion"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBundle {
    pub alignment: f64,
    pub video_aesthetic: f64,
    pub image_aesthetic: f64,
    pub motion: f64,
    pub aggregate: f64,
}

impl RewardBundle {
    pub fn components(&self) -> [f64; 4] {
        [self.alignment, self.video_aesthetic, self.image_aesthetic, self.motion]
    }

    pub fn aspect(&self, aspect: Aspect) -> f64 {
        match aspect {
            Aspect::Aggregate => self.aggregate,
            Aspect::Alignment => self.alignment,
            Aspect::Video => self.video_aesthetic,
            Aspect::Image => self.image_aesthetic,
            Aspect::Motion => self.motion,
        }
    }
}

/// What a GSB comparison looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aspect {
    Aggregate,
    Alignment,
    Video,
    Image,
    Motion,
}

impl Aspect {
    pub const ALL: [Aspect; 5] = [
        Aspect::Aggregate,
        Aspect::Alignment,
        Aspect::Video,
        Aspect::Image,
        Aspect::Motion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Aggregate => "aggregate",
            Aspect::Alignment => "alignment",
            Aspect::Video => "video",
            Aspect::Image => "image",
            Aspect::Motion => "motion",
        }
    }
}

fn law(task: &Task, prompt: usize) -> Result<&TargetLaw> {
    Ok(&task.prompt(prompt)?.law)
}

fn check_dim(task: &Task, x: &[f64]) -> Result<()> {
    if x.len() != task.state_dim() {
        return Err(invalid(format!("sample has {} values, task expects {}", x.len(), task.state_dim())));
    }
    Ok(())
}

fn log_normal_1d(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn circle_spread(c: &CircleMotion) -> f64 {
    ((c.radius * c.radius_jitter).powi(2) + c.frame_noise.powi(2)).sqrt()
}

/// Negative squared distance to the nearest mode, or negative mean deviation
/// from the prompt's motion path.
pub fn reward_alignment(task: &Task, prompt: usize, x: &[f64]) -> Result<f64> {
    check_dim(task, x)?;
    Ok(match law(task, prompt)? {
        TargetLaw::Mixture(m) => -m.nearest_mode_sq(x),
        TargetLaw::Circle(c) => -mean_path_deviation(c, x, task.frames),
    })
}

/// Log-density of the whole sample under the prompt's law.
pub fn reward_aesthetic(task: &Task, prompt: usize, x: &[f64]) -> Result<f64> {
    check_dim(task, x)?;
    Ok(match law(task, prompt)? {
        TargetLaw::Mixture(m) => m.log_density(x),
        TargetLaw::Circle(c) => {
            let path = c.anchored_path(&x[0..2], task.frames);
            let s = circle_spread(c);
            let frames: f64 = path
                .iter()
                .enumerate()
                .map(|(i, p)| log_normal_1d(x[2 * i], p[0], s) + log_normal_1d(x[2 * i + 1], p[1], s))
                .sum::<f64>()
                / task.frames as f64;
            let start = wrap_angle(c.angle_of(&x[0..2]) - c.phase);
            frames + log_normal_1d(start, 0.0, c.phase_jitter)
        }
    })
}

/// Frame-level quality: mean per-frame radial log-density for motion
/// prompts, best single-component log-density for mixtures.
pub fn reward_image_aesthetic(task: &Task, prompt: usize, x: &[f64]) -> Result<f64> {
    check_dim(task, x)?;
    Ok(match law(task, prompt)? {
        TargetLaw::Mixture(m) => m.best_component_log_density(x),
        TargetLaw::Circle(c) => {
            let s = circle_spread(c);
            x.chunks(2)
                .map(|f| {
                    let r = ((f[0] - c.center[0]).powi(2) + (f[1] - c.center[1]).powi(2)).sqrt();
                    log_normal_1d(r, c.radius, s)
                })
                .sum::<f64>()
                / task.frames as f64
        }
    })
}

/// `-mean |(f_{i+1} - f_i) - (f_i - f_{i-1})|^2` over interior frames.
pub fn reward_motion(frames: &[f64], frame_dim: usize) -> Result<f64> {
    if frame_dim == 0 || !frames.len().is_multiple_of(frame_dim) {
        return Err(invalid("frame data does not divide into frames"));
    }
    let f = frames.len() / frame_dim;
    if f < 3 {
        return Err(invalid(format!("motion needs at least 3 frames, got {f}")));
    }
    let at = |i: usize, j: usize| frames[i * frame_dim + j];
    let mut total = 0.0;
    for i in 1..f - 1 {
        total += (0..frame_dim)
            .map(|j| {
                let a = at(i + 1, j) - 2.0 * at(i, j) + at(i - 1, j);
                a * a
            })
            .sum::<f64>();
    }
    Ok(-total / (f - 2) as f64)
}

/// Raw components; motion is 0 for tasks with fewer than three frames.
pub fn reward_components(task: &Task, prompt: usize, x: &[f64]) -> Result<[f64; 4]> {
    let motion = if task.frames >= 3 {
        reward_motion(x, task.frame_dim)?
    } else {
        0.0
    };
    Ok([
        reward_alignment(task, prompt, x)?,
        reward_aesthetic(task, prompt, x)?,
        reward_image_aesthetic(task, prompt, x)?,
        motion,
    ])
}

/// Frozen per-component normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl NormStats {
    /// Population statistics of a reference batch.
    pub fn from_reference(rows: &[[f64; 4]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("reference batch is empty"));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for c in 0..4 {
            mean[c] = rows.iter().map(|r| r[c]).sum::<f64>() / n;
            std[c] = (rows.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n).sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn identity() -> Self {
        Self {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }
}

/// Aggregation weights plus the normalization they apply to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub weights: [f64; 4],
    pub stats: NormStats,
    /// Components whose reference std falls below this are scored 0.
    pub std_floor: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            weights: [0.3, 0.3, 0.2, 0.2],
            stats: NormStats::identity(),
            std_floor: 1e-8,
        }
    }
}

impl RewardWeights {
    pub fn new(weights: [f64; 4], stats: NormStats) -> Result<Self> {
        let w = Self {
            weights,
            stats,
            std_floor: 1e-8,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(invalid("reward weights must be finite and nonnegative"));
        }
        if self.weights.iter().all(|w| *w == 0.0) {
            return Err(invalid("at least one reward weight must be positive"));
        }
        Ok(())
    }

    pub fn z_scores(&self, c: &[f64; 4]) -> [f64; 4] {
        let mut z = [0.0; 4];
        for i in 0..4 {
            if self.stats.std[i] >= self.std_floor {
                z[i] = (c[i] - self.stats.mean[i]) / self.stats.std[i];
            }
        }
        z
    }
}

/// `sum_i w_i z_i` over the z-normalized components.
pub fn aggregate(components: &[f64; 4], weights: &RewardWeights) -> Result<f64> {
    weights.validate()?;
    let z = weights.z_scores(components);
    Ok(z.iter().zip(&weights.weights).map(|(z, w)| z * w).sum())
}

/// Something that scores terminal samples. Only the final state is ever
/// passed in.
pub trait TerminalReward {
    fn score(&self, prompt: usize, x: &[f64]) -> Result<RewardBundle>;
}

/// Analytic components, z-normalized and weighted.
#[derive(Debug, Clone)]
pub struct OracleReward {
    pub task: Task,
    pub weights: RewardWeights,
}

impl OracleReward {
    pub fn new(task: Task, weights: RewardWeights) -> Self {
        Self { task, weights }
    }
}

impl TerminalReward for OracleReward {
    fn score(&self, prompt: usize, x: &[f64]) -> Result<RewardBundle> {
        let c = reward_components(&self.task, prompt, x)?;
        Ok(RewardBundle {
            alignment: c[0],
            video_aesthetic: c[1],
            image_aesthetic: c[2],
            motion: c[3],
            aggregate: aggregate(&c, &self.weights)?,
        })
    }
}

/// `-log sigmoid((r_pref - r_other) / sqrt(u_pref^2 + u_other^2))`.
pub fn rank_loss(r_pref: f64, r_other: f64, u_pref: f64, u_other: f64) -> f64 {
    let m = (r_pref - r_other) / (u_pref * u_pref + u_other * u_other).sqrt();
    // -log sigmoid(m) = softplus(-m)
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

/// Preference pair: `preferred` is 0 when `a` wins, 1 when `b` wins.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub preferred: u8,
}

const RM_EMBED: usize = 8;

/// Learned scorer: encoder over `[sample, prompt embedding]` and a head that
/// emits a score and a log-uncertainty.
#[derive(Debug, Clone)]
pub struct RewardNet {
    pub state_dim: usize,
    pub num_prompts: usize,
    pub hidden: usize,
    pub params: ParamStore,
}

impl RewardNet {
    pub fn new(state_dim: usize, num_prompts: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamStore::new();
        nn::init_table(&mut params, "rm.emb", num_prompts, RM_EMBED, 1.0, rng);
        nn::init_dense(&mut params, "rm.enc0", state_dim + RM_EMBED, hidden, 1.0, rng);
        nn::init_dense(&mut params, "rm.enc1", hidden, hidden, 1.0, rng);
        nn::init_dense(&mut params, "rm.head", hidden, 2, 0.5, rng);
        Self {
            state_dim,
            num_prompts,
            hidden,
            params,
        }
    }

    /// Returns `(score, log_uncertainty)`, each `B x 1`.
    pub fn forward(&self, g: &mut Graph, x: Var, prompts: &[usize], mode: Bind) -> Result<(Var, Var)> {
        if let Some(&p) = prompts.iter().find(|&&p| p >= self.num_prompts) {
            return Err(Error::UnknownPrompt(p));
        }
        let table = nn::bind(g, &self.params, "rm.emb", mode)?;
        let e = g.gather_rows(table, prompts)?;
        let h = g.concat_cols(&[x, e])?;
        let h = nn::dense(g, &self.params, "rm.enc0", h, mode)?;
        let h = g.tanh(h);
        let h = nn::dense(g, &self.params, "rm.enc1", h, mode)?;
        let h = g.tanh(h);
        let out = nn::dense(g, &self.params, "rm.head", h, mode)?;
        Ok((g.slice_cols(out, 0, 1)?, g.slice_cols(out, 1, 1)?))
    }

    /// `(score, uncertainty)` per row.
    pub fn predict(&self, xs: &[Vec<f64>], prompts: &[usize]) -> Result<Vec<(f64, f64)>> {
        let mut g = Graph::new();
        let flat: Vec<f64> = xs.iter().flatten().copied().collect();
        let x = g.input(xs.len(), self.state_dim, flat)?;
        let (s, lu) = self.forward(&mut g, x, prompts, Bind::Frozen)?;
        Ok(g.value(s)
            .iter()
            .zip(g.value(lu))
            .map(|(s, lu)| (*s, lu.exp()))
            .collect())
    }

    /// Mean rank loss over a batch of pairs, differentiable in the parameters.
    pub fn pair_loss(&self, g: &mut Graph, pairs: &[&PreferencePair]) -> Result<Var> {
        let n = pairs.len();
        let mut pref = Vec::with_capacity(n * self.state_dim);
        let mut other = Vec::with_capacity(n * self.state_dim);
        for p in pairs {
            let (w, l) = if p.preferred == 0 { (&p.a, &p.b) } else { (&p.b, &p.a) };
            pref.extend_from_slice(w);
            other.extend_from_slice(l);
        }
        let prompts: Vec<usize> = pairs.iter().map(|p| p.prompt).collect();
        let xp = g.input(n, self.state_dim, pref)?;
        let xo = g.input(n, self.state_dim, other)?;
        let (rp, lup) = self.forward(g, xp, &prompts, Bind::Train)?;
        let (ro, luo) = self.forward(g, xo, &prompts, Bind::Train)?;
        let up = g.exp(lup);
        let uo = g.exp(luo);
        let up2 = g.square(up);
        let uo2 = g.square(uo);
        let s2 = g.add(up2, uo2)?;
        let s = g.sqrt(s2);
        let diff = g.sub(rp, ro)?;
        let m = g.div(diff, s)?;
        let ls = g.log_sigmoid(m);
        let total = g.mean(ls);
        Ok(g.neg(total))
    }
}

impl TerminalReward for RewardNet {
    fn score(&self, prompt: usize, x: &[f64]) -> Result<RewardBundle> {
        let (s, _) = self.predict(&[x.to_vec()], &[prompt])?[0];
        Ok(RewardBundle {
            alignment: f64::NAN,
            video_aesthetic: f64::NAN,
            image_aesthetic: f64::NAN,
            motion: f64::NAN,
            aggregate: s,
        })
    }
}

/// Labels pairs of samples by their oracle aggregate, flipping each label
/// with probability `label_noise`.
pub fn make_preferences(
    oracle: &OracleReward,
    samples: &[(usize, Vec<f64>, Vec<f64>)],
    label_noise: f64,
    rng: &mut RngStream,
) -> Result<Vec<PreferencePair>> {
    samples
        .iter()
        .map(|(p, a, b)| {
            let ra = oracle.score(*p, a)?.aggregate;
            let rb = oracle.score(*p, b)?.aggregate;
            let mut preferred = if ra >= rb { 0 } else { 1 };
            if rng.uniform() < label_noise {
                preferred = 1 - preferred;
            }
            Ok(PreferencePair {
                prompt: *p,
                a: a.clone(),
                b: b.clone(),
                preferred,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 64,
            lr: 3e-3,
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardTrainReport {
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// Fraction of pairs where the net ranks the labelled winner higher.
pub fn pair_accuracy(net: &RewardNet, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let prompts: Vec<usize> = pairs.iter().map(|p| p.prompt).collect();
    let a: Vec<Vec<f64>> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<Vec<f64>> = pairs.iter().map(|p| p.b.clone()).collect();
    let sa = net.predict(&a, &prompts)?;
    let sb = net.predict(&b, &prompts)?;
    let hits = pairs
        .iter()
        .zip(sa.iter().zip(&sb))
        .filter(|(p, (a, b))| (a.0 > b.0) == (p.preferred == 0))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Fits `net` on the leading share of `pairs` and reports accuracy on the rest.
pub fn train_reward_model(
    net: &mut RewardNet,
    pairs: &[PreferencePair],
    cfg: &RewardTrainConfig,
    rng: &mut RngStream,
) -> Result<RewardTrainReport> {
    if pairs.len() < 100 {
        return Err(invalid(format!("reward model needs at least 100 pairs, got {}", pairs.len())));
    }
    if let Some(p) = pairs.iter().find(|p| p.a.len() != net.state_dim || p.b.len() != net.state_dim) {
        return Err(invalid(format!("pair for prompt {} has the wrong dimension", p.prompt)));
    }
    let n_hold = ((pairs.len() as f64) * cfg.holdout).round() as usize;
    let (train, hold) = pairs.split_at(pairs.len() - n_hold);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let batch: Vec<&PreferencePair> = (0..cfg.batch).map(|_| &train[rng.below(train.len())]).collect();
        let mut g = Graph::new();
        let loss = net.pair_loss(&mut g, &batch)?;
        last = g.scalar(loss);
        if !last.is_finite() {
            return Err(Error::NonFinite {
                stage: "reward",
                what: "rank loss",
                iteration: step,
            });
        }
        g.backward(loss, &mut net.params)?;
        net.params.clip_grad_norm(10.0);
        adam.step(&mut net.params)?;
    }
    Ok(RewardTrainReport {
        heldout_accuracy: pair_accuracy(net, hold)?,
        final_loss: last,
    })
}

/// Good/Same/Bad fractions of paired comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gsb {
    pub good: f64,
    pub same: f64,
    pub bad: f64,
    pub pairs: usize,
}

impl Gsb {
    pub fn net(&self) -> f64 {
        self.good - self.bad
    }
}

/// Per pair: good if `a - b > delta`, bad if `a - b < -delta`, same otherwise.
pub fn gsb_compare(a: &[f64], b: &[f64], delta: f64) -> Result<Gsb> {
    if a.len() != b.len() {
        return Err(invalid(format!("GSB needs paired samples, got {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(invalid("GSB needs at least one pair"));
    }
    if !(delta >= 0.0) {
        return Err(invalid(format!("GSB margin must be nonnegative, got {delta}")));
    }
    let (mut good, mut bad) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        if d > delta {
            good += 1;
        } else if d < -delta {
            bad += 1;
        }
    }
    let n = a.len();
    Ok(Gsb {
        good: good as f64 / n as f64,
        bad: bad as f64 / n as f64,
        same: (n - good - bad) as f64 / n as f64,
        pairs: n,
    })
}
