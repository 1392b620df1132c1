use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvdg")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_bad_flags() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-synth"));
    assert_eq!(run(&["project", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
}

#[test]
fn missing_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("views");
    let out = run(&["project", "--in", s(&dir.path().join("missing.pcb")), "--views", "6", "--res", "32", "--out-dir", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out_dir.join("FAILED").exists());
    let pgms = std::fs::read_dir(&out_dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgms, 0);
}

#[test]
fn augment_then_project() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = run(&["--seed", "3", "gen-synth", "--classes", "2", "--per-class", "1", "--val-per-class", "0", "--target-per-class", "1", "--points", "500", "--out", s(&data)]);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));
    let cloud = data.join("source/sphere/sphere_0000.pcb");
    let holed = dir.path().join("aug/holed.xyz");
    let out = run(&["--seed", "1", "augment", "--in", s(&cloud), "--kind", "hole", "--param", "0.24", "--out", s(&holed)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&holed).unwrap().lines().count(), 500 - 120);

    let views = dir.path().join("views");
    let out = run(&["project", "--in", s(&holed), "--views", "14clock", "--res", "32", "--out-dir", s(&views)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let pgm = std::fs::read(views.join("view_12_top.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    assert!(views.join("stack.tnsr").exists());
    assert!(views.join("resolved_config.json").exists());
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = run(&["gen-synth", "--classes", "3", "--per-class", "4", "--val-per-class", "1", "--target-per-class", "2", "--points", "400", "--out", s(&data)]);
    assert_eq!(gen.status.code(), Some(0), "{}", String::from_utf8_lossy(&gen.stderr));

    let config = dir.path().join("tiny.json");
    std::fs::write(
        &config,
        r#"{"model": {"backbone": {"depth": 9, "width": 4, "resolution": 32}, "mmp_scales": [1, 2], "strip_dim": 8},
            "train": {"batch_size": 4, "num_points": 256}}"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = run(&["--seed", "2", "--deterministic", "train", "--config", s(&config), "--data", s(&data.join("source.json")), "--out", s(&run_dir), "--epochs", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["best.ckpt", "final.ckpt", "history.jsonl", "summary.json", "resolved_config.json"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(run_dir.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    let resolved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["resolved"]["train"]["seed"], 2);

    let eval_dir = dir.path().join("eval");
    let out = run(&["eval", "--model", s(&run_dir.join("final.ckpt")), "--data", s(&data.join("target.json")), "--num-points", "256", "--out", s(&eval_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap()).unwrap();
    let oa = metrics["overall_acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oa));
    assert_eq!(std::fs::read_to_string(eval_dir.join("predictions.jsonl")).unwrap().lines().count(), 6);
    let csv = std::fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sphere,box,cylinder");

    // wrong class count is a usage error
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"num_classes": 5}}"#).unwrap();
    let out = run(&["train", "--config", s(&bad), "--data", s(&data.join("source.json")), "--out", s(&dir.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn utilization_and_gradcheck_commands() {
    let dir = tempfile::tempdir().unwrap();
    let feats = dir.path().join("f.tnsr");
    let eye = mvdg::Tensor32::from_fn(&[3, 3], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    mvdg::io::write_tensor(&feats, &eye).unwrap();
    let out_dir = dir.path().join("util");
    let out = run(&["profile-util", "--features", s(&feats), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("utilization.json")).unwrap()).unwrap();
    assert_eq!(rep["used_count"], 3);

    let config = dir.path().join("m.json");
    let mut model = mvdg::model::ModelConfig::desk(3);
    model.backbone.width = 4;
    model.backbone.resolution = 32;
    model.mmp_scales = vec![1, 2];
    model.strip_dim = 5;
    std::fs::write(&config, serde_json::to_string(&model).unwrap()).unwrap();
    let gc = dir.path().join("gc");
    let out = run(&["gradcheck", "--config", s(&config), "--classes", "3", "--samples", "60", "--out", s(&gc)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(gc.join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(rep["passed"], true);
}
