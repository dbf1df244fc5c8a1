use std::sync::OnceLock;

use diffcore::RngStream;
use flowpost::ardistill::{
    causality_probe, collect_ode_pairs, dmd_grad, dmd_signal, dmd_train, pair_regression_loss, self_forcing_rollout,
    stage2_causal_regression, stage3_self_forcing, DmdBatch, DmdConfig, MaskMode, PairDataset, RegressionConfig,
    StudentConfig, StudentGenerator,
};
use flowpost::flowsde::{sample_terminals, Cond, NoiseSchedule, PathSpec, SdeSteps};
use flowpost::genmodel::{fit_flow_matching, FitConfig, FlowNet, FlowNetConfig, Task};

/// A sequence teacher trained just long enough to produce structured frames.
fn teacher() -> &'static FlowNet {
    static CELL: OnceLock<FlowNet> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = Task::sequence();
        let mut rng = RngStream::derive(1, "teacher-data", 0, 0);
        let data = task.generate_dataset(1000, 0.0, &mut rng).unwrap();
        let mut net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::derive(1, "teacher", 0, 0));
        let fit = FitConfig {
            steps: 1500,
            batch: 128,
            lr: 2e-3,
            grad_clip: 5.0,
            detail_rate: 0.0,
        };
        fit_flow_matching(&mut net, &data, &fit, &mut rng, "pretrain", |_, _, _| {}).unwrap();
        net
    })
}

fn student(mode: MaskMode, seed: u64) -> StudentGenerator {
    let cfg = StudentConfig::for_task(&Task::sequence(), mode);
    StudentGenerator::new(cfg, &mut RngStream::derive(seed, "student", 0, 0)).unwrap()
}

fn small_dmd() -> DmdConfig {
    DmdConfig {
        iterations: 3,
        batch: 16,
        ..DmdConfig::default()
    }
}

fn pairs(n: usize) -> PairDataset {
    collect_ode_pairs(teacher(), &[0, 1, 2], n, &NoiseSchedule::default(), 4, "pairs").unwrap()
}

#[test]
fn no_generator_updates_keep_the_init_and_fake_ratio_is_logged() {
    let schedule = NoiseSchedule::default();
    let init = student(MaskMode::Bidirectional, 2);
    let mut s = init.clone();
    let mut fake = teacher().clone();
    let cfg = DmdConfig {
        iterations: 0,
        ..small_dmd()
    };
    dmd_train(&mut s, teacher(), &mut fake, &cfg, &schedule, 1, "distill-dmd", |_| panic!("no iterations")).unwrap();
    assert_eq!(s.params, init.params);
    assert_eq!(fake.params, teacher().params);

    let mut log = Vec::new();
    dmd_train(&mut s, teacher(), &mut fake, &small_dmd(), &schedule, 1, "distill-dmd", |st| log.push(st.clone()))
        .unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|st| st.fake_updates == 5 && st.objective.is_finite()));
    assert_ne!(s.params.flatten(), init.params.flatten());
}

#[test]
fn mismatched_score_networks_are_rejected() {
    let schedule = NoiseSchedule::default();
    let point = Task::point();
    let wrong = FlowNet::new(FlowNetConfig::for_task(&point), &mut RngStream::new(1, 0));
    let s = student(MaskMode::Bidirectional, 3);
    let eps = RngStream::new(2, 0).gaussian(4 * 16);
    let x = s.generate(&[0, 1, 2, 0], &eps).unwrap();
    let batch = DmdBatch::draw(vec![0, 1, 2, 0], 16, &schedule, 0.04, &mut RngStream::new(3, 0)).unwrap();
    assert!(dmd_signal(&x, &batch, teacher(), &wrong).is_err());
    let mut fake = wrong.clone();
    let mut s = s;
    assert!(dmd_train(&mut s, teacher(), &mut fake, &small_dmd(), &schedule, 1, "distill-dmd", |_| {}).is_err());
    assert!(DmdBatch::draw(vec![0], 16, &schedule, 0.99, &mut RngStream::new(3, 0)).is_err());
}

#[test]
fn duplicating_a_batch_keeps_the_gradient() {
    let schedule = NoiseSchedule::default();
    let fake = {
        let mut f = teacher().clone();
        f.params.nudge(0, 0.3);
        f.params.nudge(7, -0.2);
        f
    };
    let mut s = student(MaskMode::BlockCausal, 4);
    let mut rng = RngStream::new(5, 0);
    let prompts = vec![0, 1, 2, 1];
    let eps = rng.gaussian(4 * 16);
    let batch = DmdBatch::draw(prompts.clone(), 16, &schedule, 0.04, &mut rng).unwrap();
    dmd_grad(&mut s, teacher(), &fake, &eps, &batch).unwrap();
    let one = s.params.flatten_grads();

    let twice = DmdBatch {
        prompts: [prompts.clone(), prompts].concat(),
        t: [batch.t.clone(), batch.t.clone()].concat(),
        noise: [batch.noise.clone(), batch.noise.clone()].concat(),
    };
    dmd_grad(&mut s, teacher(), &fake, &[eps.clone(), eps].concat(), &twice).unwrap();
    let two = s.params.flatten_grads();
    let scale = one.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(scale > 0.0);
    let gap = one.iter().zip(&two).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap <= 1e-12 * scale, "gap {gap} at scale {scale}");
}

#[test]
fn ode_pairs_are_counted_reproducible_and_match_direct_sampling() {
    let schedule = NoiseSchedule::default();
    let a = pairs(7);
    assert_eq!(a.len(), 7);
    assert_eq!((a.noise.len(), a.samples.len()), (7 * 16, 7 * 16));
    assert_eq!(a.prompts, vec![0, 1, 2, 0, 1, 2, 0]);
    assert_eq!(pairs(7), a);

    let specs = a
        .prompts
        .iter()
        .enumerate()
        .map(|(i, &p)| PathSpec::new(p, SdeSteps::None, RngStream::derive(4, "pairs", p as u64, i as u64)))
        .collect();
    let direct = sample_terminals(teacher(), &Cond::Prompts(a.prompts.clone()), &schedule, specs).unwrap();
    assert_eq!(direct.concat(), a.samples);
    for (i, &p) in a.prompts.iter().enumerate() {
        let eps = RngStream::derive(4, "pairs", p as u64, i as u64).gaussian(16);
        assert_eq!(&a.noise[i * 16..(i + 1) * 16], eps.as_slice());
    }
    assert!(collect_ode_pairs(teacher(), &[], 3, &schedule, 4, "pairs").is_err());
}

#[test]
fn causal_regression_learns_the_pairs_and_stays_causal() {
    let data = pairs(600);
    let mut s = student(MaskMode::BlockCausal, 6);
    assert!(causality_probe(&s, 0, 1).unwrap().passed());
    let before = pair_regression_loss(&s, &data).unwrap();
    for steps in [1, 7] {
        let mut short = s.clone();
        let cfg = RegressionConfig {
            steps,
            ..RegressionConfig::default()
        };
        stage2_causal_regression(&mut short, &data, &cfg, 3, |_, _, _| {}).unwrap();
        assert!(causality_probe(&short, 1, 2).unwrap().passed(), "after {steps} steps");
    }
    let cfg = RegressionConfig {
        steps: 800,
        ..RegressionConfig::default()
    };
    stage2_causal_regression(&mut s, &data, &cfg, 3, |_, loss, _| assert!(loss.is_finite())).unwrap();
    let after = pair_regression_loss(&s, &data).unwrap();
    assert!(after <= 0.5 * before, "loss {before} -> {after}");
    for p in 0..3 {
        let rep = causality_probe(&s, p, 9).unwrap();
        assert!(rep.passed(), "prompt {p}: {rep:?}");
        assert!(rep.results[0].frame_changed);
    }

    // zero self-forcing iterations leave the stage-2 student untouched
    let mut s3 = s.clone();
    let mut fake = teacher().clone();
    let cfg = DmdConfig {
        iterations: 0,
        ..small_dmd()
    };
    stage3_self_forcing(&mut s3, teacher(), &mut fake, &cfg, &NoiseSchedule::default(), 1, |_| {}).unwrap();
    assert_eq!(s3.params, s.params);
}

#[test]
fn causal_stages_refuse_a_bidirectional_student() {
    let data = pairs(9);
    let mut s = student(MaskMode::Bidirectional, 7);
    assert!(stage2_causal_regression(&mut s, &data, &RegressionConfig::default(), 1, |_, _, _| {}).is_err());
    let mut fake = teacher().clone();
    assert!(stage3_self_forcing(&mut s, teacher(), &mut fake, &small_dmd(), &NoiseSchedule::default(), 1, |_| {}).is_err());
    assert!(self_forcing_rollout(&s, 0, &mut RngStream::new(1, 0)).is_err());
    assert!(!causality_probe(&s, 0, 1).unwrap().passed());
}

#[test]
fn single_frame_regression_ignores_history() {
    let cfg = StudentConfig {
        frames: 1,
        ..StudentConfig::for_task(&Task::sequence(), MaskMode::BlockCausal)
    };
    let s = StudentGenerator::new(cfg, &mut RngStream::new(1, 0)).unwrap();
    let mut rng = RngStream::new(2, 0);
    let eps = rng.gaussian(3 * 2);
    let direct = s.generate(&[0, 1, 2], &eps).unwrap();
    for _ in 0..3 {
        let history = rng.gaussian(3 * 2);
        let mut g = diffcore::Graph::new();
        let tf = s.teacher_forced_graph(&mut g, &[0, 1, 2], &eps, &history, flowpost::nn::Bind::Frozen).unwrap();
        assert_eq!(g.value(tf), direct.as_slice());
    }
}

#[test]
fn rollouts_are_reproducible_and_frame_zero_ignores_later_noise() {
    let s = student(MaskMode::BlockCausal, 8);
    let a = self_forcing_rollout(&s, 1, &mut RngStream::derive(3, "roll", 0, 0)).unwrap();
    let b = self_forcing_rollout(&s, 1, &mut RngStream::derive(3, "roll", 0, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 16);

    let eps = RngStream::new(4, 0).gaussian(16);
    let base = s.generate(&[2], &eps).unwrap();
    let mut rng = RngStream::new(5, 0);
    for _ in 0..5 {
        let mut e = eps.clone();
        for v in &mut e[2..] {
            *v += rng.normal();
        }
        let out = s.generate(&[2], &e).unwrap();
        assert_eq!(out[..2], base[..2]);
    }
}
