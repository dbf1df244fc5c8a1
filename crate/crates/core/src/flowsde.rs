//! Reverse-time sampling for rectified-flow models.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data) on the grid
//! `t_k = 1 - k/T`. A deterministic step follows the probability-flow ODE
//! `x' = x - dt v`. A stochastic step follows the reverse SDE with diffusion
//! `sigma_t = eta sqrt(t / (1 - t))`, where the score is recovered from the
//! velocity through `grad log q_t(x) = -(x + (1 - t) v) / t`:
//!
//! ```text
//! mean = x - dt [v + sigma_t^2 / (2t) (x + (1 - t) v)]
//! x'   = mean + sigma_t sqrt(dt) z
//! ```
//!
//! Mixed trajectories take SDE steps only at a chosen subset of grid indices
//! (a single index in isotemporal mode) and record the Gaussian transition
//! kernel there so that policy ratios can be evaluated later.

use diffcore::RngStream;

use crate::error::{invalid, Error, Result};
pub use crate::gaussian::{GaussianOracle, Marginal};

const TIME_TOL: f64 = 1e-9;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Conditioning for a batch: one prompt id or one embedding row per sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Cond {
    Prompts(Vec<usize>),
    /// Prompts plus an optional detail token per row.
    Detailed {
        prompts: Vec<usize>,
        details: Vec<Option<usize>>,
    },
    /// Row-major `B x dim` conditioning vectors.
    Embeddings { dim: usize, values: Vec<f64> },
}

impl Cond {
    pub fn len(&self) -> usize {
        match self {
            Cond::Prompts(p) => p.len(),
            Cond::Detailed { prompts, .. } => prompts.len(),
            Cond::Embeddings { dim, values } => values.len() / dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` of this conditioning.
    pub fn select(&self, idx: &[usize]) -> Cond {
        match self {
            Cond::Prompts(p) => Cond::Prompts(idx.iter().map(|&i| p[i]).collect()),
            Cond::Detailed { prompts, details } => Cond::Detailed {
                prompts: idx.iter().map(|&i| prompts[i]).collect(),
                details: idx.iter().map(|&i| details[i]).collect(),
            },
            Cond::Embeddings { dim, values } => Cond::Embeddings {
                dim: *dim,
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
            },
        }
    }
}

/// Anything that yields a velocity for a batch of states.
pub trait VelocityField {
    fn state_dim(&self) -> usize;

    /// `x` is `B x D` row-major, `t` has one time per row.
    fn velocity(&self, x: &[f64], t: &[f64], cond: &Cond) -> Result<Vec<f64>>;
}

impl VelocityField for GaussianOracle {
    fn state_dim(&self) -> usize {
        self.dim()
    }

    fn velocity(&self, x: &[f64], t: &[f64], _cond: &Cond) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(x.len());
        for (row, &ti) in x.chunks(d).zip(t) {
            out.extend(GaussianOracle::velocity(self, row, ti));
        }
        Ok(out)
    }
}

/// Closed-form marginal law, velocity and score at time `t` for Gaussian data.
pub fn gaussian_oracle(t: f64, data_mean: Vec<f64>, data_cov: Vec<f64>) -> Result<(Marginal, GaussianOracle)> {
    let oracle = GaussianOracle::new(crate::gaussian::MvGaussian::new(data_mean, data_cov)?);
    Ok((oracle.marginal(t), oracle))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub eta: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            steps: 25,
            eta: 0.7,
            t_min: 0.04,
            t_max: 0.96,
        }
    }
}

impl NoiseSchedule {
    pub fn new(steps: usize, eta: f64, t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self {
            steps,
            eta,
            t_min,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(invalid(format!(
                "need 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.eta < 0.0 {
            return Err(invalid("eta must be nonnegative"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `t_k = 1 - k/T`.
    pub fn time(&self, k: usize) -> f64 {
        1.0 - k as f64 / self.steps as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }

    fn in_window(&self, t: f64) -> bool {
        t >= self.t_min - TIME_TOL && t <= self.t_max + TIME_TOL
    }

    /// Step indices whose start time lies in `[t_min, t_max]`.
    pub fn eligible_indices(&self) -> Vec<usize> {
        (0..self.steps).filter(|&k| self.in_window(self.time(k))).collect()
    }

    pub fn is_eligible(&self, k: usize) -> bool {
        k < self.steps && self.in_window(self.time(k))
    }

    /// `sigma_t = eta sqrt(t / (1 - t))`, defined on `[t_min, t_max]`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        if !self.in_window(t) {
            return Err(Error::Domain(format!(
                "sigma({t}) outside [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(self.eta * (t / (1.0 - t)).sqrt())
    }
}

/// Temporal gradient rectification factor
/// `lambda(t) = sqrt(dt) / sigma_t + sigma_t sqrt(dt) (1 - t) / (2t)`.
pub fn lambda_rect(t: f64, dt: f64, sigma: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("lambda_rect needs t in (0, 1), got {t}")));
    }
    if sigma <= 0.0 || dt <= 0.0 {
        return Err(Error::Domain(format!(
            "lambda_rect needs sigma > 0 and dt > 0, got sigma={sigma} dt={dt}"
        )));
    }
    let sdt = dt.sqrt();
    Ok(sdt / sigma + sigma * sdt * (1.0 - t) / (2.0 * t))
}

/// Isotropic Gaussian transition `N(mean, std^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl TransitionKernel {
    /// `(coef, offset)` with `log p = coef * |x - mean|^2 + offset`.
    pub(crate) fn logp_affine(&self) -> (f64, f64) {
        let var = self.std * self.std;
        let d = self.mean.len() as f64;
        (-0.5 / var, -0.5 * d * (LN_2PI + var.ln()))
    }
}

/// Gaussian log-density of `x_next` under `kernel`.
pub fn transition_logprob(kernel: &TransitionKernel, x_next: &[f64]) -> Result<f64> {
    if !(kernel.std > 0.0) {
        return Err(invalid(format!("kernel std must be positive, got {}", kernel.std)));
    }
    if kernel.mean.len() != x_next.len() {
        return Err(invalid(format!(
            "kernel dimension {} vs state dimension {}",
            kernel.mean.len(),
            x_next.len()
        )));
    }
    let sq: f64 = kernel
        .mean
        .iter()
        .zip(x_next)
        .map(|(m, x)| {
            let d = x - m;
            d * d
        })
        .sum();
    let (coef, offset) = kernel.logp_affine();
    Ok(sq * coef + offset)
}

pub fn ode_step(x: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(x, v)| x - dt * v).collect()
}

/// Mean of the reverse-SDE transition. The evaluation order is mirrored
/// exactly by the differentiable version in `grpoflow`.
pub fn kernel_mean(x: &[f64], v: &[f64], t: f64, dt: f64, sigma: f64) -> Vec<f64> {
    let a = sigma * sigma / (2.0 * t);
    let c = 1.0 - t;
    x.iter()
        .zip(v)
        .map(|(&x, &v)| x - (v + (x + v * c) * a) * dt)
        .collect()
}

/// One reverse-SDE step from grid index `k`, with noise `z`.
pub fn sde_step(
    x: &[f64],
    k: usize,
    v: &[f64],
    z: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(Vec<f64>, TransitionKernel)> {
    let t = schedule.time(k);
    let sigma = schedule.sigma(t)?;
    let dt = schedule.dt();
    let mean = kernel_mean(x, v, t, dt, sigma);
    let std = sigma * dt.sqrt();
    let next = mean.iter().zip(z).map(|(m, z)| m + std * z).collect();
    Ok((next, TransitionKernel { mean, std }))
}

/// Which grid steps of a trajectory are stochastic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SdeSteps {
    /// Pure ODE sampling.
    None,
    /// Isotemporal mode: exactly one stochastic step at this grid index.
    Single(usize),
    /// Every eligible grid index.
    AllEligible,
}

impl SdeSteps {
    fn contains(&self, k: usize, schedule: &NoiseSchedule) -> bool {
        match self {
            SdeSteps::None => false,
            SdeSteps::Single(i) => *i == k,
            SdeSteps::AllEligible => schedule.is_eligible(k),
        }
    }
}

/// A recorded stochastic transition.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeTransition {
    /// Grid index the step starts from.
    pub index: usize,
    pub kernel: TransitionKernel,
    /// Old-policy log-density of `states[index + 1]` under `kernel`.
    pub logp: f64,
    pub noise: Vec<f64>,
}

/// One reverse-time sampling path.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    /// Detail token the path was conditioned on, if any.
    pub detail: Option<usize>,
    /// `states[k]` is the state at `t_k`; `states[T]` is the terminal sample.
    pub states: Vec<Vec<f64>>,
    pub transitions: Vec<SdeTransition>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has states")
    }

    /// The single stochastic step index, when the trajectory is isotemporal.
    pub fn sde_index(&self) -> Option<usize> {
        match self.transitions.as_slice() {
            [one] => Some(one.index),
            _ => None,
        }
    }

    pub fn single_transition(&self) -> Option<&SdeTransition> {
        match self.transitions.as_slice() {
            [one] => Some(one),
            _ => None,
        }
    }

    pub fn kernel_old(&self) -> Option<&TransitionKernel> {
        self.single_transition().map(|t| &t.kernel)
    }

    pub fn logp_old(&self) -> Option<f64> {
        self.single_transition().map(|t| t.logp)
    }
}

/// One sampling request inside a batch.
#[derive(Debug, Clone)]
pub struct PathSpec {
    pub prompt: usize,
    pub detail: Option<usize>,
    pub sde: SdeSteps,
    pub stream: RngStream,
    /// Multiplier on the initial noise (1 for ordinary sampling).
    pub noise_scale: f64,
}

impl PathSpec {
    pub fn new(prompt: usize, sde: SdeSteps, stream: RngStream) -> Self {
        Self {
            prompt,
            detail: None,
            sde,
            stream,
            noise_scale: 1.0,
        }
    }
}

/// Samples a batch of trajectories in lockstep. Row `i` uses `cond` row `i`
/// and draws its initial noise, then its SDE noises, from its own stream.
pub fn sample_paths(
    field: &dyn VelocityField,
    cond: &Cond,
    schedule: &NoiseSchedule,
    specs: Vec<PathSpec>,
) -> Result<Vec<Trajectory>> {
    schedule.validate()?;
    let b = specs.len();
    if cond.len() != b {
        return Err(invalid(format!("{} conditioning rows for {b} paths", cond.len())));
    }
    for s in &specs {
        if let SdeSteps::Single(k) = s.sde {
            if !schedule.is_eligible(k) {
                return Err(Error::Domain(format!(
                    "SDE index {k} (t = {}) outside [{}, {}]",
                    schedule.time(k),
                    schedule.t_min,
                    schedule.t_max
                )));
            }
        }
    }
    let d = field.state_dim();
    let dt = schedule.dt();
    let mut streams: Vec<RngStream> = Vec::with_capacity(b);
    let mut trajs: Vec<Trajectory> = Vec::with_capacity(b);
    let mut sde: Vec<SdeSteps> = Vec::with_capacity(b);
    for mut s in specs {
        let x0: Vec<f64> = s.stream.gaussian(d).into_iter().map(|z| z * s.noise_scale).collect();
        trajs.push(Trajectory {
            prompt: s.prompt,
            detail: s.detail,
            states: vec![x0],
            transitions: Vec::new(),
        });
        sde.push(s.sde);
        streams.push(s.stream);
    }
    if b == 0 {
        return Ok(trajs);
    }
    for k in 0..schedule.steps {
        let t = schedule.time(k);
        let x: Vec<f64> = trajs.iter().flat_map(|tr| tr.states[k].iter().copied()).collect();
        let v = field.velocity(&x, &vec![t; b], cond)?;
        for i in 0..b {
            let xi = &x[i * d..(i + 1) * d];
            let vi = &v[i * d..(i + 1) * d];
            let next = if sde[i].contains(k, schedule) {
                let z = streams[i].gaussian(d);
                let (next, kernel) = sde_step(xi, k, vi, &z, schedule)?;
                let logp = transition_logprob(&kernel, &next)?;
                trajs[i].transitions.push(SdeTransition {
                    index: k,
                    kernel,
                    logp,
                    noise: z,
                });
                next
            } else {
                ode_step(xi, vi, dt)
            };
            trajs[i].states.push(next);
        }
    }
    Ok(trajs)
}

/// Isotemporal trajectory: SDE exactly at grid index `k`, ODE elsewhere.
pub fn sample_mixed_trajectory(
    field: &dyn VelocityField,
    prompt: usize,
    schedule: &NoiseSchedule,
    k: usize,
    stream: RngStream,
) -> Result<Trajectory> {
    let mut out = sample_paths(
        field,
        &Cond::Prompts(vec![prompt]),
        schedule,
        vec![PathSpec::new(prompt, SdeSteps::Single(k), stream)],
    )?;
    Ok(out.pop().expect("one path"))
}

/// Terminal samples only.
pub fn sample_terminals(
    field: &dyn VelocityField,
    cond: &Cond,
    schedule: &NoiseSchedule,
    specs: Vec<PathSpec>,
) -> Result<Vec<Vec<f64>>> {
    Ok(sample_paths(field, cond, schedule, specs)?
        .into_iter()
        .map(|mut t| t.states.pop().expect("terminal"))
        .collect())
}
