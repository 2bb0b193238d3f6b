use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn priorfit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_priorfit"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, spec: Option<&str>) {
    let mut args = vec![
        "--quiet",
        "synth",
        "--out-embeddings",
        "data.pfeb",
        "--out-captions",
        "caps.json",
        "--out-prior",
        "prior.json",
    ];
    if let Some(spec) = spec {
        fs::write(dir.join("spec.json"), spec).unwrap();
        args.extend(["--spec", "spec.json"]);
    }
    let out = priorfit(dir, &args);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn help_exits_zero() {
    let dir = tempdir().unwrap();
    let out = priorfit(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("select-prompt"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempdir().unwrap();
    let out = priorfit(dir.path(), &["train", "--captions", "c.json", "--prior", "p.json", "--out", "m.pfad"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--embeddings"));
    let out = priorfit(dir.path(), &["zeroshot", "--embeddings", "a", "--captions", "b", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    // Missing inputs must be caught before any file is touched.
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn corrupt_magic_exits_two() {
    let dir = tempdir().unwrap();
    synth(dir.path(), None);
    let mut bytes = fs::read(dir.path().join("data.pfeb")).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    fs::write(dir.path().join("bad.pfeb"), bytes).unwrap();
    let out = priorfit(dir.path(), &["zeroshot", "--embeddings", "bad.pfeb", "--captions", "caps.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad magic"));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempdir().unwrap();
    synth(dir.path(), Some(r#"{"n": 300, "d": 16, "seed": 0, "rule": {"task": "regression"}}"#));
    let out = priorfit(
        dir.path(),
        &[
            "train", "--embeddings", "data.pfeb", "--captions", "caps.json", "--prior", "prior.json",
            "--alpha", "-2", "--out", "m.pfad",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    synth(d, Some(r#"{"n": 400, "d": 16, "seed": 3, "rule": {"task": "regression"}}"#));

    let out = priorfit(d, &["zeroshot", "--embeddings", "data.pfeb", "--captions", "caps.json"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().next(), Some("id,assigned_index,hard_label"));
    assert_eq!(csv.lines().count(), 401);

    let train = [
        "--quiet", "train", "--embeddings", "data.pfeb", "--captions", "caps.json", "--prior", "prior.json",
        "--epochs", "5", "--batch", "64", "--seed", "7", "--out", "model.pfad", "--report", "report.json",
    ];
    let out = priorfit(d, &train);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epochs"], 5);
    assert_eq!(report["config"]["seed"], 7);
    assert_eq!(report["config"]["alpha"], 1.0);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 5);

    // The echoed config reproduces the run exactly.
    fs::write(d.join("resolved.json"), report["config"].to_string()).unwrap();
    let out = priorfit(
        d,
        &[
            "--quiet", "train", "--embeddings", "data.pfeb", "--captions", "caps.json", "--prior", "prior.json",
            "--config", "resolved.json", "--out", "again.pfad",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(d.join("model.pfad")).unwrap(), fs::read(d.join("again.pfad")).unwrap());

    let out = priorfit(
        d,
        &[
            "eval", "--model", "model.pfad", "--embeddings", "data.pfeb", "--captions", "caps.json", "--prior",
            "prior.json", "--distribution", "dist.csv",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(eval["report"]["metric"], "mae");
    assert_eq!(eval["report"]["n"], 400);
    assert!(eval["zero_shot"]["value"].as_f64().unwrap() > 0.0);
    let dist = fs::read_to_string(d.join("dist.csv")).unwrap();
    assert_eq!(dist.lines().next(), Some("value,predicted,prior,truth"));
}

#[test]
fn select_prompt_and_sweeps() {
    let dir = tempdir().unwrap();
    let d = dir.path();
    synth(d, Some(r#"{"n": 300, "d": 16, "seed": 1, "rule": {"task": "regression"}}"#));
    fs::write(
        d.join("candidates.json"),
        r#"[{"template": "a person of age [label].", "captions": "caps.json"},
            {"template": "[label] years old", "captions": "caps.json"}]"#,
    )
    .unwrap();
    let out = priorfit(
        d,
        &["select-prompt", "--embeddings", "data.pfeb", "--candidates", "candidates.json", "--prior", "prior.json"],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let ranking: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(ranking[0]["rank"], 1);
    assert_eq!(ranking[0]["distance"], ranking[1]["distance"]);

    fs::write(d.join("alphas.json"), "[0.5, 2.0]").unwrap();
    let sweep = [
        "sweep", "--kind", "alpha", "--grid", "alphas.json", "--embeddings", "data.pfeb", "--captions", "caps.json",
        "--epochs", "2", "--threads", "2",
    ];
    let out = priorfit(d, &sweep);
    assert_eq!(out.status.code(), Some(1), "alpha sweep without --prior");
    let mut with_prior = sweep.to_vec();
    with_prior.extend(["--prior", "prior.json"]);
    let out = priorfit(d, &with_prior);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rows["rows"][1]["setting"], 2.0);
    assert!(rows["rows"][0]["metric"].as_f64().is_some());

    let prior: serde_json::Value = serde_json::from_slice(&fs::read(d.join("prior.json")).unwrap()).unwrap();
    fs::write(d.join("priors.json"), serde_json::json!([prior]).to_string()).unwrap();
    let out = priorfit(
        d,
        &[
            "sweep", "--kind", "robustness", "--grid", "priors.json", "--embeddings", "data.pfeb", "--captions",
            "caps.json", "--epochs", "2",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
}
