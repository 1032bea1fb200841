use std::path::Path;
use std::process::{Command, Output};

fn handoff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handoff")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn perfect_agent_scores_one_hundred() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    let manifest = dir.path().join("m.toml");
    let out = handoff(&[
        "--manifest", arg(&manifest), "eval", "--baseline", "agent_only",
        "--p-agent-easy", "1", "--p-agent-hard", "1", "--csv", arg(&csv),
    ]);
    let text = ok(&out);
    assert!(text.contains("agent_only"));
    let body = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = body.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[3], row[8], row[9]), ("0", "100", "100"));
    let m: toml::Value = toml::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    assert_eq!(m["command"].as_str(), Some("eval"));
    assert!(m["outputs"].to_string().contains("r.csv"));
}

#[test]
fn collect_then_train_records_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds.jsonl");
    let ckpt = dir.path().join("policy.json");
    let curve = dir.path().join("curve.csv");
    ok(&handoff(&["collect", "--tasks", "6", "--budget", "4", "--out", arg(&ds)]));
    assert!(dir.path().join("ds.jsonl.manifest.toml").exists());
    ok(&handoff(&[
        "train", "--dataset", arg(&ds), "--tasks", "6", "--steps", "10",
        "--out", arg(&ckpt), "--curve", arg(&curve),
    ]));
    let m: toml::Value =
        toml::from_str(&std::fs::read_to_string(dir.path().join("policy.json.manifest.toml")).unwrap()).unwrap();
    let train = &m["args"]["command"]["train"]["train"];
    assert_eq!(train["epsilon"].as_float(), Some(0.3));
    assert_eq!(train["batch"].as_integer(), Some(64));
    assert_eq!(train["eval_every"].as_integer(), Some(5));
    assert_eq!(train["lambda"].as_float(), Some(0.08));
    let text = ok(&handoff(&["eval", "--params", arg(&ckpt), "--tasks", "6", "--manifest", arg(&dir.path().join("e.toml"))]));
    assert!(text.contains("trained"));
}

#[test]
fn bad_invocations_fail() {
    assert!(!handoff(&["eval", "--no-such-flag"]).status.success());
    assert!(!handoff(&["train"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = handoff(&[
        "--manifest", arg(&dir.path().join("m.toml")), "eval", "--baseline", "imitation",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--il-dataset"));
}
