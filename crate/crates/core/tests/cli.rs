use std::process::Command;

fn asxai(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_asxai")).args(args).output().unwrap()
}

#[test]
fn every_subcommand_has_help() {
    for sub in [
        "train",
        "project",
        "rank",
        "traits",
        "visualize",
        "explain",
        "percept-study",
        "report",
        "verify",
    ] {
        let out = asxai(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help failed");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(asxai(&["bogus"]).status.code(), Some(2));
}

#[test]
fn failures_print_a_structured_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 1\n").unwrap();
    let out = asxai(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let rec: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["status"], "error");
    assert!(!rec["message"].as_str().unwrap().is_empty());

    let missing = asxai(&["verify", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
    let rec: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(rec["kind"], "io");
}
