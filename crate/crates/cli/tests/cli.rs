use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "synth.n=80", "--set", "min_count=2", "--set", "max_count=40", "--set", "knn_k=4",
    "--set", "dim=8", "--set", "hidden=8", "--set", "proj_dim=8", "--set", "lr=0.01",
];

fn cycle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cycle"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cycle(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// synth, build-dataset, train and gap-matrix over one temp directory.
fn pipeline(root: &Path, seed: &str) -> std::path::PathBuf {
    let (d, a, c, r) = (root.join("d"), root.join("a"), root.join("c"), root.join("report.json"));
    ok(&with_small(&["synth", "--out", s(&d), "--seed", seed]));
    ok(&with_small(&["build-dataset", "--data", s(&d), "--out", s(&a), "--seed", seed]));
    ok(&with_small(&["train", "--data", s(&d), "--artifacts", s(&a), "--out-dir", s(&c), "--seed", seed]));
    ok(&with_small(&["gap-matrix", "--data", s(&d), "--artifacts", s(&a), "--checkpoints", s(&c), "--out", s(&r)]));
    r
}

#[test]
fn pipeline_reports_every_cell() {
    let root = tempfile::tempdir().unwrap();
    let r = pipeline(root.path(), "7");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&r).unwrap()).unwrap();
    let cells: Vec<(i64, i64)> = report["per_cell"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["split"] == "all")
        .map(|c| (c["train_year"].as_i64().unwrap(), c["test_year"].as_i64().unwrap()))
        .collect();
    assert_eq!(cells.len(), 16);
    for t in 2019..=2022 {
        for u in 2019..=2022 {
            assert!(cells.contains(&(t, u)), "missing {t}->{u}");
        }
    }
    assert!(report["config"]["dataset_hash"].is_string());
    let log = std::fs::read_to_string(root.path().join("c/train_log_2019.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for k in ["epoch", "L", "L_e", "L_f", "L_r"] {
        assert!(rec.get(k).is_some(), "log lacks {k}");
    }
    let pools = std::fs::read_to_string(root.path().join("a/pools_2019_2022.jsonl")).unwrap();
    assert!(pools.lines().next().unwrap().contains("config_hash"));
}

#[test]
fn report_refuses_foreign_datasets() {
    let (x, y) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let rx = pipeline(x.path(), "1");
    let ry = pipeline(y.path(), "2");
    let merged = x.path().join("merged.json");
    ok(&["report", s(&rx), s(&rx), "--out", s(&merged)]);
    let out = cycle(&["report", s(&rx), s(&ry), "--out", s(&merged)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset hash mismatch"));
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("objective_entity_tower"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    let out = cycle(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(cycle(&["grad-check", "--set", "epochz=2"]).status.code(), Some(1));
    assert_eq!(cycle(&["grad-check", "--set", "epochs"]).status.code(), Some(1));
    let help = cycle(&["gap-matrix", "--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("--checkpoints"));
}

#[test]
fn data_errors_exit_two() {
    let root = tempfile::tempdir().unwrap();
    let out = cycle(&["build-dataset", "--data", s(&root.path().join("missing")), "--out", s(root.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn environment_and_file_layers() {
    let root = tempfile::tempdir().unwrap();
    let conf = root.path().join("run.conf");
    std::fs::write(&conf, "synth.n = 60\n# comment\nsynth.topics=6\n").unwrap();
    let d = root.path().join("d");
    let out = Command::new(env!("CARGO_BIN_EXE_cycle"))
        .args(["synth", "--out", s(&d), "--config", s(&conf), "--set", "synth.topics=5"])
        .env("CYCLE_SYNTH_N", "50")
        .env("RUST_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    // env beats file, flag beats env
    assert!(stderr.contains("config synth.n=50"), "{stderr}");
    assert!(stderr.contains("config synth.topics=5"));
    assert_eq!(std::fs::read_to_string(d.join("entities.jsonl")).unwrap().lines().count(), 50);

    let bad = Command::new(env!("CARGO_BIN_EXE_cycle"))
        .args(["grad-check", "--probes", "1"])
        .env("CYCLE_NOT_A_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
