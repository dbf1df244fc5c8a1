mod common;

use std::cell::RefCell;

use diffcore::{Graph, RngStream};
use flowpost::flowsde::{lambda_rect, NoiseSchedule};
use flowpost::genmodel::{FlowNet, FlowNetConfig, Task};
use flowpost::grpoflow::{
    assign_isotemporal, collect_groups, compute_advantages, grpo_surrogate, policy_ratio, rlhf_train,
    transition_logprob_graph, GrpoConfig, IterStats, RolloutGroup,
};
use flowpost::nn::Bind;
use flowpost::rewards::{OracleReward, RewardBundle, RewardWeights, TerminalReward};
use flowpost::Result;
use proptest::prelude::*;

fn setup(seed: u64) -> (Task, FlowNet, OracleReward, NoiseSchedule) {
    let task = Task::point();
    let net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::derive(seed, "init", 0, 0));
    let reward = OracleReward::new(task.clone(), RewardWeights::default());
    (task, net, reward, NoiseSchedule::default())
}

fn small_cfg() -> GrpoConfig {
    GrpoConfig {
        group_size: 4,
        groups: 4,
        ..GrpoConfig::default()
    }
}

fn groups(net: &FlowNet, reward: &OracleReward, s: &NoiseSchedule) -> Vec<RolloutGroup> {
    collect_groups(net, reward, &small_cfg(), s, 5, 0).unwrap()
}

#[test]
fn rotation_covers_the_window_once() {
    let s = NoiseSchedule::new(25, 0.7, 0.04, 0.96).unwrap();
    let eligible = s.eligible_indices();
    assert_eq!(eligible.len(), 24);
    // 20-index window: T = 21 gives t_k = 1 - k/21 for k = 1..20 inside [0.04, 0.96]
    let s20 = NoiseSchedule::new(21, 0.7, 0.04, 0.96).unwrap();
    assert_eq!(s20.eligible_indices().len(), 20);
    let mut seen = Vec::new();
    for it in 0..5 {
        let idx = assign_isotemporal(4, &s20, it, false).unwrap();
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        seen.extend(idx);
    }
    seen.sort_unstable();
    assert_eq!(seen, s20.eligible_indices());
    assert!(assign_isotemporal(30, &s, 0, false).is_err());
    assert_eq!(assign_isotemporal(30, &s, 0, true).unwrap().len(), 30);
}

#[test]
fn collected_groups_are_standardized() {
    let (_, net, reward, s) = setup(1);
    for grp in groups(&net, &reward, &s) {
        let n = grp.advantages.len() as f64;
        let mean = grp.advantages.iter().sum::<f64>() / n;
        let std = (grp.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-9);
        assert!(std == 0.0 || (std - 1.0).abs() <= 1e-6, "std {std}");
        assert!(grp.trajectories.iter().all(|t| t.prompt == grp.prompt && t.sde_index() == Some(grp.index)));
    }
}

struct Recorder<'a> {
    inner: &'a OracleReward,
    seen: RefCell<Vec<Vec<f64>>>,
}

impl TerminalReward for Recorder<'_> {
    fn score(&self, prompt: usize, x: &[f64]) -> Result<RewardBundle> {
        self.seen.borrow_mut().push(x.to_vec());
        self.inner.score(prompt, x)
    }
}

#[test]
fn rewards_only_see_terminal_states() {
    let (_, net, reward, s) = setup(2);
    let rec = Recorder {
        inner: &reward,
        seen: RefCell::new(Vec::new()),
    };
    let cfg = small_cfg();
    let gs = collect_groups(&net, &rec, &cfg, &s, 3, 0).unwrap();
    let seen = rec.seen.into_inner();
    assert_eq!(seen.len(), cfg.groups * cfg.group_size);
    let terminals: Vec<Vec<f64>> = gs.iter().flat_map(|g| g.terminals()).collect();
    assert_eq!(seen, terminals);
}

#[test]
fn log_ratio_is_first_order_in_the_parameters() {
    let (_, net, reward, s) = setup(3);
    let gs = groups(&net, &reward, &s);
    let traj = &gs[0].trajectories[0];
    let mut g = Graph::new();
    let mut grad_net = net.clone();
    let lp = transition_logprob_graph(&grad_net, &mut g, &[traj], &s, Bind::Train).unwrap();
    let lp = g.sum(lp);
    g.backward(lp, &mut grad_net.params).unwrap();
    let grad = grad_net.params.flatten_grads();
    let mut rng = RngStream::new(4, 0);
    let dir = rng.gaussian(grad.len());
    for eps in [1e-4, 1e-5] {
        let mut moved = net.clone();
        for (i, d) in dir.iter().enumerate() {
            moved.params.nudge(i, eps * d);
        }
        let r = policy_ratio(&moved, traj, &s).unwrap();
        assert!(r > 0.0);
        let predicted: f64 = grad.iter().zip(&dir).map(|(g, d)| g * eps * d).sum();
        let err = (r.ln() - predicted).abs();
        assert!(err <= 1e-2 * predicted.abs().max(1e-12), "eps {eps}: log r {} vs {predicted}", r.ln());
    }
}

#[test]
fn clipping_is_pessimistic_and_caps_the_ratio() {
    let (_, net, reward, s) = setup(4);
    let gs = groups(&net, &reward, &s);
    let mut moved = net.clone();
    let mut rng = RngStream::new(9, 0);
    for i in 0..moved.params.numel() {
        moved.params.nudge(i, 0.15 * rng.normal());
    }
    let clip = 0.2;
    let mut g = Graph::new();
    let sur = grpo_surrogate(&mut g, &moved, &gs, clip, &s).unwrap();
    assert!(sur.clip_fraction > 0.0, "perturbation too small to clip anything");
    assert_eq!(sur.skipped, 0);
    let mut row = 0;
    let mut unclipped_total = 0.0;
    for grp in &gs {
        let t = s.time(grp.index);
        let lambda = lambda_rect(t, s.dt(), s.sigma(t).unwrap()).unwrap();
        for a in &grp.advantages {
            let r = sur.ratios[row];
            let adv = a / lambda;
            let term = (r * adv).min(r.clamp(1.0 - clip, 1.0 + clip) * adv);
            assert!(term <= r * adv + 1e-12);
            if *a > 0.0 && r > 1.0 + clip {
                assert!((term - (1.0 + clip) * adv).abs() < 1e-12);
            }
            unclipped_total += r * adv;
            row += 1;
        }
    }
    assert!(sur.objective <= unclipped_total / row as f64 + 1e-12);
}

#[test]
fn clipped_branch_uses_the_band_edge() {
    // forge the stored old log-density so that r = 1 + 2 clip exactly
    let (_, net, reward, s) = setup(5);
    let mut gs = groups(&net, &reward, &s);
    let clip = 0.2;
    let grp = gs
        .iter_mut()
        .find(|g| g.advantages.iter().any(|a| *a > 0.0))
        .expect("a group with a positive advantage");
    let k = grp.advantages.iter().position(|a| *a > 0.0).unwrap();
    let a = grp.advantages[k];
    let mut only = grp.clone();
    only.trajectories = vec![grp.trajectories[k].clone()];
    only.advantages = vec![a];
    only.trajectories[0].transitions[0].logp -= (1.0f64 + 2.0 * clip).ln();
    let mut g = Graph::new();
    let sur = grpo_surrogate(&mut g, &net, &[only.clone()], clip, &s).unwrap();
    let t = s.time(only.index);
    let adv = a / lambda_rect(t, s.dt(), s.sigma(t).unwrap()).unwrap();
    assert!((sur.ratios[0] - 1.4).abs() < 1e-12);
    assert!((sur.objective - 1.2 * adv).abs() < 1e-9);
    assert_eq!(sur.clip_fraction, 1.0);
}

#[test]
fn zero_advantages_give_zero_gradient() {
    let (_, mut net, reward, s) = setup(6);
    let mut gs = groups(&net, &reward, &s);
    for g in &mut gs {
        g.advantages.iter_mut().for_each(|a| *a = 0.0);
    }
    let mut g = Graph::new();
    let sur = grpo_surrogate(&mut g, &net, &gs, 0.2, &s).unwrap();
    assert_eq!(g.scalar(sur.loss), 0.0);
    g.backward(sur.loss, &mut net.params).unwrap();
    assert!(net.params.flatten_grads().iter().all(|v| *v == 0.0));
}

#[test]
fn first_step_gradient_is_the_policy_gradient() {
    // at r = 1 the surrogate gradient equals -mean(A~ grad logp)
    let (_, mut net, reward, s) = setup(7);
    let gs = groups(&net, &reward, &s);
    let mut g = Graph::new();
    let sur = grpo_surrogate(&mut g, &net, &gs, 0.2, &s).unwrap();
    assert!(g.scalar(sur.loss).abs() < 1e-12);
    g.backward(sur.loss, &mut net.params).unwrap();
    let got = net.params.flatten_grads();

    let trajs: Vec<_> = gs.iter().flat_map(|g| g.trajectories.iter()).collect();
    let weights: Vec<f64> = gs
        .iter()
        .flat_map(|grp| {
            let t = s.time(grp.index);
            let l = lambda_rect(t, s.dt(), s.sigma(t).unwrap()).unwrap();
            grp.advantages.iter().map(move |a| -a / l)
        })
        .collect();
    let mut g = Graph::new();
    let lp = transition_logprob_graph(&net, &mut g, &trajs, &s, Bind::Train).unwrap();
    let w = g.input(weights.len(), 1, weights).unwrap();
    let weighted = g.mul(lp, w);
    let pg = g.mean(weighted);
    g.backward(pg, &mut net.params).unwrap();
    let want = net.params.flatten_grads();
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-9 * scale.max(1.0)));
}

#[test]
fn surrogate_gradient_matches_finite_differences_after_an_update() {
    // away from r = 1 as well
    let (_, net, reward, s) = setup(8);
    let gs = groups(&net, &reward, &s);
    let mut moved = net.clone();
    let mut rng = RngStream::new(10, 0);
    for i in 0..moved.params.numel() {
        moved.params.nudge(i, 0.002 * rng.normal());
    }
    let mut g = Graph::new();
    let sur = grpo_surrogate(&mut g, &moved, &gs, 0.2, &s).unwrap();
    let mut with_grads = moved.clone();
    g.backward(sur.loss, &mut with_grads.params).unwrap();
    let analytic = with_grads.params.flatten_grads();
    let err = common::fd_rel_error(&moved.params, &analytic, 200, 1e-6, 1, |p| {
        let mut n = moved.clone();
        n.params = p.clone();
        let mut g = Graph::new();
        let s = grpo_surrogate(&mut g, &n, &gs, 0.2, &s).unwrap();
        g.scalar(s.loss)
    });
    assert!(err < 1e-3, "rel err {err}");
}

fn train(cfg: &GrpoConfig, seed: u64) -> (FlowNet, Vec<IterStats>) {
    let (task, mut net, reward, s) = setup(seed);
    let mut log = Vec::new();
    rlhf_train(&mut net, &task, &reward, cfg, &s, seed, |st| log.push(st.clone())).unwrap();
    (net, log)
}

#[test]
fn rlhf_is_deterministic_and_lr_zero_is_inert() {
    let cfg = GrpoConfig {
        iterations: 6,
        ..small_cfg()
    };
    let (a, la) = train(&cfg, 11);
    let (b, lb) = train(&cfg, 11);
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);

    let frozen = GrpoConfig { lr: 0.0, ..cfg };
    let (net, log) = train(&frozen, 11);
    let (_, init, _, _) = setup(11);
    assert_eq!(net.params.flatten(), init.params.flatten());
    assert!(log.iter().all(|s| s.clip_fraction == 0.0));
}

#[test]
fn config_is_validated() {
    let (task, mut net, reward, s) = setup(12);
    for bad in [
        GrpoConfig { group_size: 1, ..small_cfg() },
        GrpoConfig { clip: 0.0, ..small_cfg() },
        GrpoConfig { clip: 1.0, ..small_cfg() },
        GrpoConfig { prompts: vec![], ..small_cfg() },
    ] {
        assert!(rlhf_train(&mut net, &task, &reward, &bad, &s, 1, |_| {}).is_err());
    }
}

proptest! {
    #[test]
    fn advantages_are_affine_invariant(
        r in proptest::collection::vec(-10.0f64..10.0, 2..16),
        a in 0.01f64..50.0,
        b in -50.0f64..50.0,
    ) {
        let x = compute_advantages(&r, 1e-8).unwrap();
        let moved: Vec<f64> = r.iter().map(|v| a * v + b).collect();
        let y = compute_advantages(&moved, 1e-8 * a).unwrap();
        for (p, q) in x.iter().zip(&y) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
