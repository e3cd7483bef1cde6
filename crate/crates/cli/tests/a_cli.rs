use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use jepa_act_core::trainer::TrainConfig;
use jepa_act_core::ModelConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_jepa-act"));
    c.env_remove("JEPA_ACT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path, steps: usize) -> PathBuf {
    let cfg = TrainConfig {
        model: ModelConfig::tiny(),
        total_steps: steps,
        warmup_steps: 2,
        batch_size: 2,
        ratio: 0.5,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["gen-data", "--out", s(&out), "--episodes", "3", "--image-size", "16", "--ticks", "12"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn full_pipeline_runs_and_eval_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let labeled = gen(dir, "labeled", &[]);
    let free = gen(dir, "free", &["--action-free", "--seed", "8"]);
    let paired = gen(dir, "paired", &["--paired", "--seed", "9"]);
    let cfg = tiny_config(dir, 8);
    let run_dir = dir.join("run");
    let out = ok(&[
        "train", "--data", s(&labeled), "--free-data", s(&free), "--config", s(&cfg), "--out", s(&run_dir),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("checkpoint"));
    let ck = run_dir.join("checkpoint.bin");
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 8);

    let eval_args = |out: &Path| {
        vec![
            "eval".to_string(),
            "--checkpoint".into(),
            s(&ck).into(),
            "--out".into(),
            s(out).into(),
            "--rollouts".into(),
            "4".into(),
            "--max-ticks".into(),
            "12".into(),
        ]
    };
    let (e1, e2) = (dir.join("eval1"), dir.join("eval2"));
    for e in [&e1, &e2] {
        let out = bin().args(eval_args(e)).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["report.json", "rollouts.csv"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f} differs between runs");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(e1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_rollouts"], 4);
    assert!(report["random_success_rate"].is_number());

    ok(&["probe-leakage", "--checkpoint", s(&ck), "--data", s(&labeled)]);

    let att = dir.join("att");
    ok(&["inspect-attention", "--checkpoint", s(&ck), "--data", s(&labeled), "--out", s(&att)]);
    assert!(fs::read_to_string(att.join("attention.svg")).unwrap().starts_with("<svg"));
    assert!(att.join("attention.csv").exists());

    let rel = dir.join("relevance.json");
    ok(&[
        "probe-action-relevance", "--checkpoint", s(&ck), "--data", s(&paired), "--bootstrap", "50", "--out", s(&rel),
    ]);
    let rel: serde_json::Value = serde_json::from_slice(&fs::read(rel).unwrap()).unwrap();
    assert!(rel["ci_low"].as_f64().unwrap() <= rel["ci_high"].as_f64().unwrap());

    let plots = dir.join("plots");
    let cmp = format!("T=8={}", s(&e1.join("report.json")));
    ok(&[
        "plot", "--metrics", s(&run_dir.join("metrics.csv")), "--report", s(&e1.join("report.json")), "--compare", &cmp,
        "--out", s(&plots),
    ]);
    let svgs = fs::read_dir(&plots).unwrap().count();
    assert_eq!(svgs, 3);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let labeled = gen(dir, "labeled", &[]);
    let free = gen(dir, "free", &["--action-free", "--seed", "8"]);
    let cfg = tiny_config(dir, 6);
    let (full, part) = (dir.join("full"), dir.join("part"));
    let base = |out: &Path| {
        vec![
            "train".to_string(),
            "--data".into(),
            s(&labeled).into(),
            "--free-data".into(),
            s(&free).into(),
            "--config".into(),
            s(&cfg).into(),
            "--out".into(),
            s(out).into(),
        ]
    };
    assert!(bin().args(base(&full)).output().unwrap().status.success());
    let mut first = base(&part);
    first.extend(["--stop-at".into(), "3".into()]);
    assert!(bin().args(first).output().unwrap().status.success());
    let resumed = dir.join("resumed");
    let mut second = base(&resumed);
    second.extend(["--resume".into(), s(&part.join("checkpoint.bin")).into()]);
    assert!(bin().args(second).output().unwrap().status.success());
    assert_eq!(
        fs::read(full.join("metrics.csv")).unwrap(),
        fs::read(resumed.join("metrics.csv")).unwrap()
    );

    // explicit flags that contradict the checkpoint are a config error
    let mut bad = base(&dir.join("bad"));
    bad.extend(["--resume".into(), s(&part.join("checkpoint.bin")).into(), "--ratio".into(), "0.1".into()]);
    let out = bin().args(bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    // usage error from argument parsing
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));

    // invalid configuration
    let labeled = gen(dir, "labeled", &[]);
    let out = run(&[
        "train", "--data", s(&labeled), "--out", s(&dir.join("r")), "--ratio", "1.5", "--steps", "2",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error kind=config:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    // T = 16 without an explicit K
    let out = run(&["train", "--data", s(&labeled), "--out", s(&dir.join("r")), "--horizon", "16"]);
    assert_eq!(out.status.code(), Some(2));

    // runtime failure: dataset missing
    let out = run(&["train", "--data", s(&dir.join("missing")), "--out", s(&dir.join("r")), "--steps", "2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error kind="));
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = |out: &Path| -> Vec<String> {
        ["gen-data", "--out", s(out), "--episodes", "2", "--image-size", "16", "--ticks", "8"]
            .iter()
            .map(|a| a.to_string())
            .collect()
    };
    let (flag, envd, default) = (dir.join("flag"), dir.join("env"), dir.join("default"));
    let mut a = args(&flag);
    a.extend(["--seed".into(), "21".into()]);
    assert!(bin().args(a).output().unwrap().status.success());
    assert!(bin().args(args(&envd)).env("JEPA_ACT_SEED", "21").output().unwrap().status.success());
    assert!(bin().args(args(&default)).output().unwrap().status.success());
    let read = |d: &Path| fs::read(d.join("episodes.bin")).unwrap();
    assert_eq!(read(&flag), read(&envd));
    assert_ne!(read(&flag), read(&default));
}
