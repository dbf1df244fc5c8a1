//! Group-relative policy optimization for flow samplers.
//!
//! Each group of rollouts shares a prompt and a single stochastic grid index
//! (isotemporal grouping). The only stochastic transition of a trajectory is
//! a Gaussian kernel, so the policy ratio is a ratio of two Gaussian
//! densities whose means come from the current and the rollout-time model.
//! Advantages are divided by the rectification factor `lambda(t_k)` of their
//! group's time before entering the clipped surrogate.

use diffcore::{Adam, AdamConfig, Graph, RngStream, Var};
use tracing::{debug, warn};

use crate::error::{invalid, Error, Result};
use crate::flowsde::{lambda_rect, sample_paths, Cond, NoiseSchedule, PathSpec, SdeSteps, Trajectory};
use crate::genmodel::{FlowNet, Task};
use crate::nn::Bind;
use crate::rewards::{RewardBundle, TerminalReward};

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub groups: usize,
    pub clip: f64,
    pub lr: f64,
    pub iterations: usize,
    /// Groups whose reward std falls below this get zero advantages.
    pub std_floor: f64,
    /// Gradient steps per rollout phase.
    pub inner_steps: usize,
    pub grad_clip: f64,
    /// Allow more groups than eligible grid indices.
    pub cycling: bool,
    pub prompts: Vec<usize>,
    /// Share of groups whose prompt carries a detail token.
    pub detail_rate: f64,
    pub collapse_window: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            groups: 8,
            clip: 0.2,
            lr: 6e-4,
            iterations: 300,
            std_floor: 1e-6,
            inner_steps: 1,
            grad_clip: 1.0,
            cycling: false,
            prompts: vec![0, 1, 2],
            detail_rate: 0.5,
            collapse_window: 20,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(invalid(format!("group size must be at least 2, got {}", self.group_size)));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(invalid(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        if self.groups == 0 || self.prompts.is_empty() || self.inner_steps == 0 {
            return Err(invalid("need at least one group, one prompt and one inner step"));
        }
        if self.lr < 0.0 {
            return Err(invalid("learning rate must be nonnegative"));
        }
        Ok(())
    }
}

/// Grid indices for `groups` groups at `iteration`: stratified over the
/// eligible window and rotated by one position per iteration, so that
/// `E / groups` consecutive iterations visit every eligible index once.
pub fn assign_isotemporal(
    groups: usize,
    schedule: &NoiseSchedule,
    iteration: usize,
    cycling: bool,
) -> Result<Vec<usize>> {
    let eligible = schedule.eligible_indices();
    let e = eligible.len();
    if e == 0 {
        return Err(Error::Domain("no grid index lies in the stochastic window".into()));
    }
    if groups > e && !cycling {
        return Err(invalid(format!("{groups} groups but only {e} eligible grid indices")));
    }
    let stride = e.div_ceil(groups).max(1);
    let shift = iteration % stride;
    Ok((0..groups)
        .map(|j| eligible[(j * e / groups + shift + j / e) % e])
        .collect())
}

/// `(R - mean) / std` with the population std; all zeros when `std < floor`.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(invalid(format!("advantages need at least 2 rewards, got {n}")));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std >= std_floor) || std == 0.0 {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt: usize,
    pub index: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBundle>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn terminals(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|t| t.terminal().to_vec()).collect()
    }
}

/// Log-density of each trajectory's recorded transition under `net`,
/// as a `B x 1` node. The arithmetic mirrors `flowsde::kernel_mean` and
/// `flowsde::transition_logprob` operation for operation, so evaluating the
/// rollout model reproduces the stored values bit for bit.
pub fn transition_logprob_graph(
    net: &FlowNet,
    g: &mut Graph,
    trajs: &[&Trajectory],
    schedule: &NoiseSchedule,
    mode: Bind,
) -> Result<Var> {
    let b = trajs.len();
    let d = net.config.state_dim;
    let dt = schedule.dt();
    let mut x = Vec::with_capacity(b * d);
    let mut x_next = Vec::with_capacity(b * d);
    let mut t = Vec::with_capacity(b);
    let (mut c, mut a, mut coef, mut offset) = (vec![], vec![], vec![], vec![]);
    for tr in trajs {
        let step = tr
            .single_transition()
            .ok_or_else(|| invalid("trajectory has no single recorded transition"))?;
        let k = step.index;
        let tk = schedule.time(k);
        let sigma = schedule.sigma(tk)?;
        x.extend_from_slice(&tr.states[k]);
        x_next.extend_from_slice(&tr.states[k + 1]);
        t.push(tk);
        c.push(1.0 - tk);
        a.push(sigma * sigma / (2.0 * tk));
        let (cf, off) = step.kernel.logp_affine();
        coef.push(cf);
        offset.push(off);
    }
    let xv = g.input(b, d, x)?;
    let v = net.forward(g, xv, &t, &trajectory_cond(trajs), mode)?;
    let cv = g.input(b, 1, c)?;
    let av = g.input(b, 1, a)?;
    let dtv = g.input(b, 1, vec![dt; b])?;
    let vc = g.mul_col(v, cv)?;
    let inner = g.add(xv, vc)?;
    let inner = g.mul_col(inner, av)?;
    let drift = g.add(v, inner)?;
    let drift = g.mul_col(drift, dtv)?;
    let mean = g.sub(xv, drift)?;
    let xn = g.input(b, d, x_next)?;
    let diff = g.sub(xn, mean)?;
    let sq = g.square(diff);
    let sq = g.sum_cols(sq);
    let coef = g.input(b, 1, coef)?;
    let offset = g.input(b, 1, offset)?;
    let lp = g.mul_col(sq, coef)?;
    Ok(g.add(lp, offset)?)
}

fn trajectory_cond(trajs: &[&Trajectory]) -> Cond {
    let prompts = trajs.iter().map(|tr| tr.prompt).collect();
    if trajs.iter().all(|tr| tr.detail.is_none()) {
        Cond::Prompts(prompts)
    } else {
        Cond::Detailed {
            prompts,
            details: trajs.iter().map(|tr| tr.detail).collect(),
        }
    }
}

/// `q_theta(x_{k+1} | x_k) / q_old(x_{k+1} | x_k)` for one trajectory.
pub fn policy_ratio(net: &FlowNet, traj: &Trajectory, schedule: &NoiseSchedule) -> Result<f64> {
    let logp_old = traj.logp_old().ok_or_else(|| invalid("trajectory carries no old kernel"))?;
    let mut g = Graph::new();
    let lp = transition_logprob_graph(net, &mut g, &[traj], schedule, Bind::Frozen)?;
    Ok((g.value(lp)[0] - logp_old).exp())
}

/// Loss node and diagnostics of one surrogate evaluation.
#[derive(Debug)]
pub struct Surrogate {
    pub loss: Var,
    pub objective: f64,
    pub ratios: Vec<f64>,
    pub clip_fraction: f64,
    pub skipped: usize,
}

/// `-mean min(r A~, clip(r, 1 - eps, 1 + eps) A~)` with `A~ = A / lambda(t_k)`.
pub fn grpo_surrogate(
    g: &mut Graph,
    net: &FlowNet,
    groups: &[RolloutGroup],
    clip: f64,
    schedule: &NoiseSchedule,
) -> Result<Surrogate> {
    let mut rows: Vec<(&Trajectory, f64)> = Vec::new();
    for grp in groups {
        if grp.advantages.len() != grp.trajectories.len() {
            return Err(invalid("group advantages do not match its trajectories"));
        }
        let t = schedule.time(grp.index);
        let lambda = lambda_rect(t, schedule.dt(), schedule.sigma(t)?)?;
        for (tr, a) in grp.trajectories.iter().zip(&grp.advantages) {
            rows.push((tr, a / lambda));
        }
    }
    if rows.is_empty() {
        return Err(invalid("surrogate over an empty batch"));
    }
    let mut skipped = 0;
    loop {
        let mark = g.len();
        let trajs: Vec<&Trajectory> = rows.iter().map(|r| r.0).collect();
        let lp = transition_logprob_graph(net, g, &trajs, schedule, Bind::Train)?;
        let old: Vec<f64> = trajs
            .iter()
            .map(|t| t.logp_old().expect("checked by transition_logprob_graph"))
            .collect();
        let old = g.input(rows.len(), 1, old)?;
        let log_r = g.sub(lp, old)?;
        let r = g.exp(log_r);
        let ratios = g.value(r).to_vec();
        if let Some(bad) = ratios.iter().position(|r| !r.is_finite()) {
            warn!(row = bad, "non-finite policy ratio, dropping sample");
            rows.remove(bad);
            skipped += 1;
            if rows.is_empty() {
                return Err(invalid("every sample had a non-finite ratio"));
            }
            debug!(mark, "rebuilding surrogate");
            continue;
        }
        let adv = g.input(rows.len(), 1, rows.iter().map(|r| r.1).collect())?;
        let unclipped = g.mul(r, adv);
        let rc = g.clamp(r, 1.0 - clip, 1.0 + clip);
        let clipped = g.mul(rc, adv);
        let term = g.minimum(unclipped, clipped)?;
        let objective = g.mean(term);
        let loss = g.neg(objective);
        let clip_fraction =
            ratios.iter().filter(|r| (*r - 1.0).abs() > clip).count() as f64 / ratios.len() as f64;
        return Ok(Surrogate {
            loss,
            objective: g.scalar(objective),
            ratios,
            clip_fraction,
            skipped,
        });
    }
}

/// Samples one iteration's groups with the current model as the old policy.
pub fn collect_groups(
    net: &FlowNet,
    reward: &dyn TerminalReward,
    cfg: &GrpoConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    iteration: usize,
) -> Result<Vec<RolloutGroup>> {
    let indices = assign_isotemporal(cfg.groups, schedule, iteration, cfg.cycling)?;
    let n = cfg.group_size;
    let mut specs = Vec::with_capacity(cfg.groups * n);
    for (gi, &k) in indices.iter().enumerate() {
        let slot = iteration * cfg.groups + gi;
        let prompt = cfg.prompts[slot % cfg.prompts.len()];
        let mut pick = RngStream::derive(seed, "rlhf-detail", slot as u64, 0);
        let detail = (net.config.num_details > 0 && pick.uniform() < cfg.detail_rate)
            .then(|| pick.below(net.config.num_details));
        for m in 0..n {
            let stream = RngStream::derive(seed, "rlhf", slot as u64, m as u64);
            let mut spec = PathSpec::new(prompt, SdeSteps::Single(k), stream);
            spec.detail = detail;
            specs.push(spec);
        }
    }
    let cond = Cond::Detailed {
        prompts: specs.iter().map(|s| s.prompt).collect(),
        details: specs.iter().map(|s| s.detail).collect(),
    };
    let mut trajs = sample_paths(net, &cond, schedule, specs)?.into_iter();
    let mut groups = Vec::with_capacity(cfg.groups);
    for &k in &indices {
        let members: Vec<Trajectory> = trajs.by_ref().take(n).collect();
        let prompt = members[0].prompt;
        let rewards = members
            .iter()
            .map(|t| reward.score(prompt, t.terminal()))
            .collect::<Result<Vec<_>>>()?;
        let agg: Vec<f64> = rewards.iter().map(|r| r.aggregate).collect();
        let advantages = compute_advantages(&agg, cfg.std_floor)?;
        groups.push(RolloutGroup {
            prompt,
            index: k,
            trajectories: members,
            rewards,
            advantages,
        });
    }
    Ok(groups)
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub components: [f64; 4],
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub validity: f64,
    pub loss: f64,
}

/// Halts a run whose mean reward stays far below its running peak.
#[derive(Debug, Clone)]
pub struct CollapseGuard {
    window: usize,
    peak: f64,
    below: usize,
}

impl CollapseGuard {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            peak: f64::NEG_INFINITY,
            below: 0,
        }
    }

    /// True once the reward has trailed the peak by more than half the
    /// peak's magnitude (at least 1) for `window` consecutive iterations.
    pub fn observe(&mut self, reward: f64) -> bool {
        self.peak = self.peak.max(reward);
        if self.peak - reward > 0.5 * self.peak.abs().max(1.0) {
            self.below += 1;
        } else {
            self.below = 0;
        }
        self.window > 0 && self.below >= self.window
    }
}

fn mean_of(rows: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = rows.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Runs GRPO on `net` in place. On a non-finite loss the parameters are
/// rolled back to the last good state before the error is returned.
pub fn rlhf_train(
    net: &mut FlowNet,
    task: &Task,
    reward: &dyn TerminalReward,
    cfg: &GrpoConfig,
    schedule: &NoiseSchedule,
    seed: u64,
    mut on_iter: impl FnMut(&IterStats),
) -> Result<()> {
    cfg.validate()?;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut guard = CollapseGuard::new(cfg.collapse_window);
    for it in 0..cfg.iterations {
        let groups = collect_groups(net, reward, cfg, schedule, seed, it)?;
        let all = || groups.iter().flat_map(|g| g.rewards.iter());
        let mean_reward = mean_of(all().map(|r| r.aggregate));
        let mut components = [0.0; 4];
        for (c, slot) in components.iter_mut().enumerate() {
            *slot = mean_of(all().map(|r| r.components()[c]));
        }
        let mut valid = 0usize;
        let mut total = 0usize;
        for grp in &groups {
            for t in &grp.trajectories {
                valid += task.is_valid(grp.prompt, t.terminal())? as usize;
                total += 1;
            }
        }
        let last_good = net.params.clone();
        let mut first = None;
        for inner in 0..cfg.inner_steps {
            let mut g = Graph::new();
            let s = grpo_surrogate(&mut g, net, &groups, cfg.clip, schedule)?;
            let loss = g.scalar(s.loss);
            if !loss.is_finite() {
                net.params = last_good;
                return Err(Error::NonFinite {
                    stage: "rlhf",
                    what: "loss",
                    iteration: it,
                });
            }
            g.backward(s.loss, &mut net.params)?;
            let norm = net.params.clip_grad_norm(cfg.grad_clip);
            adam.step(&mut net.params)?;
            if inner == 0 {
                first = Some((loss, s.clip_fraction, norm));
            }
        }
        let (loss, clip_fraction, grad_norm) = first.expect("at least one inner step");
        let stats = IterStats {
            iteration: it,
            mean_reward,
            components,
            clip_fraction,
            grad_norm,
            validity: valid as f64 / total as f64,
            loss,
        };
        debug!(it, mean_reward, clip_fraction, grad_norm, "rlhf iteration");
        on_iter(&stats);
        if guard.observe(mean_reward) {
            return Err(Error::RewardCollapse {
                stage: "rlhf",
                iteration: it,
                window: cfg.collapse_window,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_hand_values() {
        let a = compute_advantages(&[1.0, 2.0, 3.0], 1e-6).unwrap();
        let e = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((a[0] + 1.2247).abs() < 1e-4 && a[1].abs() < 1e-15 && (a[2] - 1.2247).abs() < 1e-4);
        assert!((a[2] - e).abs() < 1e-12);
        assert_eq!(compute_advantages(&[5.0, 5.0, 5.0], 1e-6).unwrap(), vec![0.0; 3]);
        assert!(compute_advantages(&[1.0], 1e-6).is_err());
    }

    #[test]
    fn isotemporal_examples() {
        let s = NoiseSchedule::default();
        // a window with 20 eligible indices
        let s20 = NoiseSchedule { steps: 25, eta: 0.7, t_min: 0.2, t_max: 0.96 };
        let e = s20.eligible_indices();
        assert_eq!(e.len(), 20);
        let first = assign_isotemporal(4, &s20, 0, false).unwrap();
        assert_eq!(first, vec![e[0], e[5], e[10], e[15]]);
        let mut seen: Vec<usize> = (0..5).flat_map(|it| assign_isotemporal(4, &s20, it, false).unwrap()).collect();
        seen.sort_unstable();
        assert_eq!(seen, e);
        let one = assign_isotemporal(1, &s, 3, false).unwrap();
        assert!(s.is_eligible(one[0]));
        assert!(assign_isotemporal(30, &s, 0, false).is_err());
        let cyc = assign_isotemporal(30, &s, 0, true).unwrap();
        assert_eq!(cyc.len(), 30);
        assert!(cyc.iter().all(|&k| s.is_eligible(k)));
    }

    #[test]
    fn collapse_guard_needs_a_sustained_drop() {
        let mut g = CollapseGuard::new(3);
        assert!(!g.observe(2.0));
        assert!(!g.observe(0.5));
        assert!(!g.observe(0.5));
        assert!(!g.observe(1.5));
        assert!(!g.observe(0.2));
        assert!(!g.observe(0.2));
        assert!(g.observe(0.2));
    }
}
