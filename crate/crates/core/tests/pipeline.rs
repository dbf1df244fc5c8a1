use std::path::Path;
use std::process::Command;

use diffcore::{ParamStore, Tensor};
use flowpost::pipeline::checkpoint::FORMAT_VERSION;
use flowpost::pipeline::metrics::{CsvTable, HEADER};
use flowpost::pipeline::{
    evaluate, model_path, plot, render_svg, run_all, run_stage, stage_dir, Checkpoint, ExperimentConfig, Model, Stage,
};
use flowpost::rewards::Aspect;
use flowpost::Error;

/// The point task with every stage shrunk to a few steps.
fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::for_task("point").unwrap();
    c.out = out.to_path_buf();
    c.pretrain.samples_per_prompt = 200;
    c.pretrain.fit.steps = 200;
    c.sft.steps = 100;
    c.rewards.reference_per_prompt = 100;
    c.rlhf.iterations = 4;
    c.pe.train.iterations = 3;
    c.pe.samples = 8;
    c.distill.dmd.iterations = 3;
    c.distill.dmd.batch = 16;
    c.distill.pairs = 60;
    c.distill.regress.steps = 10;
    c.distill.self_forcing.iterations = 3;
    c.distill.self_forcing.batch = 16;
    c.eval.per_prompt = 100;
    c
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).unwrap() == std::fs::read(b).unwrap()
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let reports = run_all(&cfg).unwrap();
    assert_eq!(reports.len(), 5);

    for stage in Stage::ALL {
        let metrics = std::fs::read_to_string(stage_dir(&cfg, stage).join("metrics.csv")).unwrap();
        let table = CsvTable::parse(&metrics).unwrap();
        assert_eq!(metrics.lines().next(), Some(HEADER));
        let secs = table.column("seconds").unwrap();
        assert!(table.rows.iter().all(|r| r[secs].is_empty()), "{stage:?} logged wall time");
        // iterations never go backwards within a stage tag
        let (st, it) = (table.column("stage").unwrap(), table.column("iter").unwrap());
        for w in table.rows.windows(2) {
            if w[0][st] == w[1][st] {
                assert!(w[0][it].parse::<usize>().unwrap() <= w[1][it].parse::<usize>().unwrap());
            }
        }
        // saved checkpoints re-encode to the same bytes
        let path = model_path(&cfg, stage);
        let bytes = std::fs::read(&path).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), bytes);
        assert_eq!(ck.get("stage").unwrap().split('-').next(), Some(stage.name()));
        assert_eq!(ck.get("config_hash").unwrap(), cfg.hash());

        let svg = dir.path().join(format!("{}.svg", stage.name()));
        plot(&stage_dir(&cfg, stage).join("metrics.csv"), &svg).unwrap();
        let again = render_svg(&metrics).unwrap();
        assert_eq!(std::fs::read_to_string(&svg).unwrap(), again);
        assert!(again.contains("<polyline"));
    }

    // evaluation
    let (_, sft) = Model::load(&cfg, "sft").unwrap();
    let (_, rlhf) = Model::load(&cfg, "rlhf").unwrap();
    let same = evaluate(&cfg, ("sft", &sft), ("sft", &sft), &cfg.eval.prompts, 0.1).unwrap();
    for row in &same.rows {
        assert_eq!(row.gsb.same, 1.0, "{:?}", row.aspect);
        assert_eq!(row.mean_a, row.mean_b);
    }
    let rep = evaluate(&cfg, ("rlhf", &rlhf), ("sft", &sft), &cfg.eval.prompts, 0.1).unwrap();
    assert_eq!(rep.rows.len(), Aspect::ALL.len());
    for row in &rep.rows {
        assert!((row.gsb.good + row.gsb.same + row.gsb.bad - 1.0).abs() < 1e-12);
    }
    let csv = rep.to_csv();
    assert_eq!(csv.lines().count(), Aspect::ALL.len() + 1);
    let written = rep.write(&dir.path().join("eval")).unwrap();
    assert_eq!(std::fs::read_to_string(written).unwrap(), csv);
    assert!(evaluate(&cfg, ("rlhf", &rlhf), ("sft", &sft), &[], 0.1).is_err());
    assert!(matches!(
        evaluate(&cfg, ("rlhf", &rlhf), ("sft", &sft), &[0, 9], 0.1),
        Err(Error::UnknownPrompt(9))
    ));
    for spec in ["pe", "distill", "pretrain"] {
        let (_, m) = Model::load(&cfg, spec).unwrap();
        let r = evaluate(&cfg, (spec, &m), ("sft", &sft), &[0], 0.1).unwrap();
        assert!(r.rows.iter().all(|row| row.mean_a.is_finite()));
    }
    let stage2 = stage_dir(&cfg, Stage::Distill).join("stage2.fgpl");
    let (label, _) = Model::load(&cfg, stage2.to_str().unwrap()).unwrap();
    assert_eq!(label, "stage2");
    let prefs = stage_dir(&cfg, Stage::Pretrain).join("dataset.fgpl");
    assert!(Model::load(&cfg, prefs.to_str().unwrap()).is_err());

    // re-running a finished stage rewrites identical bytes
    let before = std::fs::read(model_path(&cfg, Stage::Rlhf)).unwrap();
    let metrics_before = std::fs::read(stage_dir(&cfg, Stage::Rlhf).join("metrics.csv")).unwrap();
    run_stage(Stage::Rlhf, &cfg).unwrap();
    assert_eq!(std::fs::read(model_path(&cfg, Stage::Rlhf)).unwrap(), before);
    assert_eq!(std::fs::read(stage_dir(&cfg, Stage::Rlhf).join("metrics.csv")).unwrap(), metrics_before);
}

#[test]
fn wall_clock_fills_the_seconds_column() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.wall_clock = true;
    let rep = run_stage(Stage::Pretrain, &cfg).unwrap();
    let table = CsvTable::parse(&std::fs::read_to_string(rep.metrics).unwrap()).unwrap();
    let secs = table.column("seconds").unwrap();
    assert!(table.rows.iter().all(|r| r[secs].parse::<f64>().unwrap() >= 0.0));
}

#[test]
fn stages_name_their_missing_prerequisite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    for (stage, needs) in [
        (Stage::Sft, "pretrain"),
        (Stage::Rlhf, "sft"),
        (Stage::Pe, "rlhf"),
        (Stage::Distill, "rlhf"),
    ] {
        let e = run_stage(stage, &cfg).unwrap_err();
        assert_eq!(e.to_string(), format!("requires stage: {needs}"));
    }
    assert!(!model_path(&cfg, Stage::Sft).exists());
}

#[test]
fn invalid_configs_are_refused_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.rlhf.prompts = vec![0, 7];
    assert!(matches!(run_stage(Stage::Pretrain, &cfg), Err(Error::Config { .. })));
    let mut cfg = tiny(dir.path());
    cfg.rewards.weights = [0.0; 4];
    assert!(run_stage(Stage::Pretrain, &cfg).is_err());
    let mut cfg = tiny(dir.path());
    cfg.task = "nope".into();
    assert!(run_stage(Stage::Pretrain, &cfg).is_err());
    assert!(!dir.path().join("pretrain").exists());
}

#[test]
fn checkpoint_bytes_follow_the_layout() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap());
    let ck = Checkpoint::new(p).with("stage", "sft");
    let bytes = ck.to_bytes().unwrap();

    let mut want = b"FGPL".to_vec();
    want.extend(FORMAT_VERSION.to_le_bytes());
    want.extend(10u32.to_le_bytes());
    want.extend(b"stage=sft\n");
    want.extend(1u32.to_le_bytes());
    want.extend(b"w");
    want.extend(2u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(1.5f32.to_le_bytes());
    want.extend((-2.0f32).to_le_bytes());
    assert_eq!(bytes, want);
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), ck);

    // values are stored once as f32
    let mut p = ParamStore::new();
    p.insert("x", Tensor::new(vec![1], vec![0.1]).unwrap());
    let back = Checkpoint::from_bytes(&Checkpoint::new(p).to_bytes().unwrap()).unwrap();
    assert_eq!(back.params.flatten(), vec![0.1f32 as f64]);

    let empty = Checkpoint::default().to_bytes().unwrap();
    assert_eq!(empty.len(), 12);
    assert!(Checkpoint::from_bytes(&empty).unwrap().params.is_empty());
}

#[test]
fn damaged_checkpoints_are_structured_errors() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let bytes = Checkpoint::new(p).with("k", "v").to_bytes().unwrap();
    let header = 4 + 4 + 4 + 4;
    for cut in [0, 3, 6, 10, 14, header + 3, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut at {cut}");
    }
    let mut v2 = bytes.clone();
    v2[4] = 2;
    let e = Checkpoint::from_bytes(&v2).unwrap_err();
    assert!(e.to_string().contains("version"), "{e}");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.fgpl");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(&path, bad).unwrap();
    let e = Checkpoint::load(&path).unwrap_err();
    assert!(e.to_string().contains("bad magic"), "{e}");

    // a different config hash only warns
    let good = dir.path().join("good.fgpl");
    Checkpoint::default().with("config_hash", "abc").save(&good).unwrap();
    assert!(Checkpoint::load_checked(&good, "def").is_ok());
}

#[test]
fn plot_skips_empty_columns_and_reports_bad_lines() {
    let csv = format!("{HEADER}\nsft,0,,,,,,,,,0.5,\nsft,50,,,,,,,,,0.25,\n");
    let svg = render_svg(&csv).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert!(svg.contains("kl: no values, skipped"));
    assert_eq!(render_svg(&csv).unwrap(), svg);
    let broken = format!("{HEADER}\nsft,0,,,,,,,,,0.5,\nsft,1,,\n");
    assert!(matches!(render_svg(&broken), Err(Error::Csv { line: 3, .. })));
    let dir = tempfile::tempdir().unwrap();
    assert!(plot(&dir.path().join("missing.csv"), &dir.path().join("x.svg")).is_err());
}

#[test]
fn command_line_runs_stages_and_plots() {
    let exe = env!("CARGO_BIN_EXE_flowpost");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let run = |args: &[&str]| Command::new(exe).args(args).env("RUST_LOG", "warn").output().unwrap();

    let o = run(&["sft", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("requires stage: pretrain"));

    let pretrain = |dest: &Path| {
        run(&[
            "pretrain",
            "--out",
            dest.to_str().unwrap(),
            "--iters",
            "60",
            "--set",
            "pretrain.samples_per_prompt=100",
            "--seed",
            "3",
        ])
    };
    let o = pretrain(&out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("validity"));
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    let cfg = ExperimentConfig::parse(&config).unwrap();
    assert_eq!((cfg.seed, cfg.pretrain.fit.steps), (3, 60));

    let svg = dir.path().join("p.svg");
    let metrics = out.join("pretrain/metrics.csv");
    let o = run(&["plot", "--metrics", metrics.to_str().unwrap(), "--svg", svg.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    assert!(!run(&["pretrain", "--clip", "0.3", "--out", out.to_str().unwrap()]).status.success());
    assert!(!run(&["rlhf", "--set", "rlhf.bogus=1", "--out", out.to_str().unwrap()]).status.success());
    let twin = dir.path().join("twin");
    assert!(pretrain(&twin).status.success());
    assert!(same_bytes(&metrics, &twin.join("pretrain/metrics.csv")));
    assert!(same_bytes(&out.join("pretrain/model.fgpl"), &twin.join("pretrain/model.fgpl")));
}
