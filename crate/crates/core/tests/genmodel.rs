mod common;

use diffcore::{Graph, RngStream};
use flowpost::flowsde::{Cond, NoiseSchedule};
use flowpost::gaussian::{max_abs_diff, moments};
use flowpost::genmodel::{
    fit_flow_matching, flow_matching_loss_with, mean_path_deviation, sample_per_prompt, validity_rate, Dataset,
    FitConfig, FlowNet, FlowNetConfig, Task, TargetLaw,
};
use flowpost::nn::Bind;
use flowpost::pipeline::stages::flownet_from;
use flowpost::pipeline::{run_stage, Checkpoint, ExperimentConfig, Stage};
use flowpost::Error;
use proptest::prelude::*;

fn fit(steps: usize, lr: f64) -> FitConfig {
    FitConfig {
        steps,
        batch: 256,
        lr,
        grad_clip: 5.0,
        detail_rate: 0.0,
    }
}

fn mixture_law(task: &Task, p: usize) -> flowpost::genmodel::Mixture {
    match &task.prompt(p).unwrap().law {
        TargetLaw::Mixture(m) => m.clone(),
        TargetLaw::Circle(_) => panic!("prompt {p} is not a mixture"),
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let task = Task::point();
    let mut net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::new(1, 0));
    let mut rng = RngStream::new(2, 0);
    let b = 6;
    let x0 = rng.gaussian(b * 2);
    let eps = rng.gaussian(b * 2);
    let t: Vec<f64> = (0..b).map(|_| rng.uniform()).collect();
    let cond = Cond::Prompts(vec![0, 1, 2, 3, 0, 1]);

    let mut g = Graph::new();
    let loss = flow_matching_loss_with(&net, &mut g, &x0, &cond, &t, &eps, Bind::Train).unwrap();
    g.backward(loss, &mut net.params).unwrap();
    let analytic = net.params.flatten_grads();
    let base = net.clone();
    let err = common::fd_rel_error(&net.params, &analytic, 300, 1e-6, 3, |p| {
        let mut n = base.clone();
        n.params = p.clone();
        let mut g = Graph::new();
        let l = flow_matching_loss_with(&n, &mut g, &x0, &cond, &t, &eps, Bind::Frozen).unwrap();
        g.scalar(l)
    });
    assert!(err < 1e-3, "relative error {err:e}");
}

#[test]
fn trained_gaussian_marginal_matches_truth() {
    let task = Task::gaussian_control();
    let truth = mixture_law(&task, 0).components()[0].1.clone();
    let mut rng = RngStream::derive(5, "gauss", 0, 0);
    let data = task.generate_dataset(4000, 0.0, &mut rng).unwrap();
    let mut net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::derive(5, "init", 0, 0));
    fit_flow_matching(&mut net, &data, &fit(2000, 2e-3), &mut rng, "pretrain", |_, _, _| {}).unwrap();
    let (_, xs) = sample_per_prompt(&net, &[0], 10_000, &NoiseSchedule::default(), 6, "gauss-eval").unwrap();
    let (m, c) = moments(&xs);
    let dm = max_abs_diff(&m, truth.mean());
    let dc = max_abs_diff(&c, &truth.cov());
    assert!(dm < 0.1 && dc < 0.15, "mean gap {dm}, cov gap {dc}");
}

#[test]
fn zero_steps_and_zero_lr_leave_the_net_alone() {
    let task = Task::point();
    let data = task.generate_dataset(50, 0.2, &mut RngStream::new(1, 0)).unwrap();
    let init = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::new(2, 0));
    let mut net = init.clone();
    fit_flow_matching(&mut net, &data, &fit(0, 1e-3), &mut RngStream::new(3, 0), "sft", |_, _, _| {}).unwrap();
    assert_eq!(net.params, init.params);
    fit_flow_matching(&mut net, &data, &fit(20, 0.0), &mut RngStream::new(3, 0), "sft", |_, _, _| {}).unwrap();
    assert_eq!(net.params.flatten(), init.params.flatten());
}

#[test]
fn non_finite_data_aborts_training() {
    let task = Task::point();
    let mut data = Dataset::new(2);
    data.push(&[f64::NAN, 0.0], 0, false, None);
    let mut net = FlowNet::new(FlowNetConfig::for_task(&task), &mut RngStream::new(2, 0));
    let e = fit_flow_matching(&mut net, &data, &fit(5, 1e-3), &mut RngStream::new(3, 0), "pretrain", |_, _, _| {})
        .unwrap_err();
    assert!(matches!(e, Error::NonFinite { stage: "pretrain", iteration: 0, .. }), "{e}");
    assert!(fit_flow_matching(&mut net, &Dataset::new(2), &fit(5, 1e-3), &mut RngStream::new(3, 0), "sft", |_, _, _| {})
        .is_err());
}

#[test]
fn clean_pretraining_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::for_task("point").unwrap();
    cfg.out = dir.path().to_path_buf();
    cfg.pretrain.corruption = 0.0;
    let rep = run_stage(Stage::Pretrain, &cfg).unwrap();
    // exact target draws score 0.9889 here
    let v = rep.get("validity").unwrap();
    assert!(v >= 0.95, "validity {v}");
    let metrics = std::fs::read_to_string(&rep.metrics).unwrap();
    assert!(!metrics.contains("NaN") && !metrics.contains("inf"));
}

#[test]
fn point_pretraining_and_fine_tuning() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::for_task("point").unwrap();
    cfg.out = dir.path().join("a");
    run_stage(Stage::Pretrain, &cfg).unwrap();
    let sft = run_stage(Stage::Sft, &cfg).unwrap();
    let (before, after) = (sft.get("validity_before").unwrap(), sft.get("validity_after").unwrap());
    assert!(after >= before, "sft validity {after} below pretrained {before}");

    // prompt conditioning: draws for prompt i are likelier under law i than under any other
    let task = cfg.task().unwrap();
    let net = flownet_from(Checkpoint::load(&sft.checkpoint).unwrap()).unwrap();
    let all: Vec<usize> = (0..task.num_prompts()).collect();
    let (ids, xs) = sample_per_prompt(&net, &all, 250, &cfg.schedule, 17, "conditioning").unwrap();
    let laws: Vec<_> = all.iter().map(|&p| mixture_law(&task, p)).collect();
    let hits = ids
        .iter()
        .zip(&xs)
        .filter(|(&i, x)| {
            let own = laws[i].log_density(x);
            laws.iter().enumerate().all(|(j, l)| j == i || own > l.log_density(x))
        })
        .count();
    let rate = hits as f64 / xs.len() as f64;
    assert!(rate >= 0.9, "conditioning rate {rate}");

    // same seed, same bytes
    let mut again = cfg.clone();
    again.out = dir.path().join("b");
    run_stage(Stage::Pretrain, &again).unwrap();
    let a = std::fs::read(cfg.out.join("pretrain/metrics.csv")).unwrap();
    let b = std::fs::read(again.out.join("pretrain/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(cfg.out.join("pretrain/model.fgpl")).unwrap(),
        std::fs::read(again.out.join("pretrain/model.fgpl")).unwrap()
    );
}

#[test]
fn sequence_samples_follow_the_motion() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::for_task("sequence").unwrap();
    cfg.out = dir.path().to_path_buf();
    run_stage(Stage::Pretrain, &cfg).unwrap();
    let sft = run_stage(Stage::Sft, &cfg).unwrap();
    let task = cfg.task().unwrap();
    let net = flownet_from(Checkpoint::load(&sft.checkpoint).unwrap()).unwrap();
    let (ids, xs) = sample_per_prompt(&net, &cfg.eval.prompts, 200, &cfg.schedule, 3, "motion").unwrap();
    let mut total = 0.0;
    for (&p, x) in ids.iter().zip(&xs) {
        let TargetLaw::Circle(c) = &task.prompt(p).unwrap().law else {
            panic!("sequence prompt {p} has no motion law")
        };
        total += mean_path_deviation(c, x, task.frames);
    }
    let dev = total / xs.len() as f64;
    assert!(dev < 0.2, "mean per-frame deviation {dev}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn validity_is_a_fraction(
        pts in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0, 0usize..4), 1..40),
    ) {
        let task = Task::point();
        let xs: Vec<Vec<f64>> = pts.iter().map(|p| vec![p.0, p.1]).collect();
        let ps: Vec<usize> = pts.iter().map(|p| p.2).collect();
        let r = validity_rate(&task, &xs, &ps).unwrap();
        prop_assert!((0.0..=1.0).contains(&r));
    }
}
