use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tranclr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tranclr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tranclr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_eval_project() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "16", "--eval", "6", "--seed", "3", "--out", p(d)]);
    let run = d.join("run");
    ok(&[
        "train",
        "--train",
        p(&d.join("train.json")),
        "--epochs",
        "1",
        "--setting",
        "extractive",
        "--tagging",
        "bio",
        "--out",
        p(&run),
    ]);
    for f in ["model.ckpt", "loss_log.jsonl", "transform.json", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["tagging"], "bio");

    let ckpt = run.join("model.ckpt");
    let stdout = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d.join("eval.json")), "--out", p(&run)]);
    assert!(stdout.contains("F1"));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["overall"]["count"], 6);
    assert_eq!(metrics["per_question"].as_array().unwrap().len(), 6);

    ok(&["project", "--checkpoint", p(&ckpt), "--data", p(&d.join("eval.json")), "--sample", "2", "--out", p(&run)]);
    let tsv = fs::read_to_string(run.join("projection.tsv")).unwrap();
    assert!(tsv.starts_with("x\ty\trole\tinstance\tepoch\n"));
    assert!(tsv.lines().count() > 2);

    let wrong = tranclr(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d.join("eval.json")), "--setting", "generative", "--out", p(&run)]);
    assert!(!wrong.status.success());
}

#[test]
fn ablation_flags_and_config_file_combine() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "8", "--out", p(d)]);
    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"model": {"d_model": 16, "d_ff": 32, "heads": 2}, "epochs": 1, "ablation": {"no_cl": true}}"#).unwrap();
    let run = d.join("run");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--train",
        p(&d.join("train.json")),
        "--no-prefix",
        "--no-tc",
        "--no-transm",
        "--seed",
        "9",
        "--out",
        p(&run),
    ]);
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let a = &saved["ablation"];
    assert_eq!((&a["no_prefix"], &a["no_tc"], &a["no_cl"], &a["no_transm"]), (&true.into(), &true.into(), &true.into(), &true.into()));
    assert_eq!(saved["seed"], 9);
    assert_eq!(saved["model"]["d_model"], 16);
    for line in fs::read_to_string(run.join("loss_log.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["l_tc"], 0.0);
        assert_eq!(rec["l_cl"], 0.0);
    }
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "4", "--out", p(d)]);
    let cfg = d.join("cfg.json");
    fs::write(&cfg, r#"{"loss": {"tau": 0.0}}"#).unwrap();
    let out = tranclr(&["train", "--config", p(&cfg), "--train", p(&d.join("train.json")), "--out", p(&d.join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("temperature"));
    assert!(!d.join("run").exists());
}

#[test]
fn sweep_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--n", "12", "--eval", "4", "--out", p(d)]);
    let out = d.join("sweep");
    ok(&[
        "sweep",
        "--train",
        p(&d.join("train.json")),
        "--eval",
        p(&d.join("eval.json")),
        "--sizes",
        "0,6",
        "--epochs",
        "1",
        "--setting",
        "extractive",
        "--out",
        p(&out),
    ]);
    let table = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    let rows = tranclr::harness::parse_sweep_table(&table).unwrap();
    assert_eq!(rows.iter().map(|r| r.size).collect::<Vec<_>>(), vec![0, 6]);
    assert!(out.join("metrics_0.json").exists() && out.join("metrics_6.json").exists());
}

#[test]
fn quick_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["check", "--quick", "--out", p(dir.path())]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("check.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 5);
}
