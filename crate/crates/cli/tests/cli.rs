use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 10] = [
    "synth.clusters=3",
    "synth.docs_per_cluster=8",
    "synth.queries_per_cluster=4",
    "synth.relevant_per_query=3",
    "synth.sentences_per_doc=8",
    "casegnn.epochs=2",
    "training.epochs=3",
    "eval.baseline_trials=20",
    "eval.subsets=3",
    "encoder.dim=16",
];

fn caselink(runs: &Path, args: &[&str], extra: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_caselink"));
    cmd.arg("--runs-dir").arg(runs).args(args);
    for s in SMALL.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.env_remove("RUST_LOG");
    for (k, _) in std::env::vars() {
        if k.starts_with("CASELINK__") {
            cmd.env_remove(k);
        }
    }
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stage_before_upstream_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = caselink(dir.path(), &["train", "--run-id", "r"], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`graph`"), "{}", stderr(&out));
}

#[test]
fn bad_keys_exit_3_and_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let out = caselink(dir.path(), &["ingest"], &["training.lamda=0", "graph.delta=3", "graph.mode=both"]);
    assert_eq!(out.status.code(), Some(3));
    let err = stderr(&out);
    for key in ["training.lamda", "graph.delta", "graph.mode"] {
        assert!(err.contains(key), "{key} missing from: {err}");
    }
}

#[test]
fn dry_run_prints_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = caselink(dir.path(), &["all", "--dry-run", "--run-id", "r"], &["training.lambda=0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let plan = String::from_utf8_lossy(&out.stdout);
    assert!(plan.contains("evaluate"));
    assert!(plan.contains("training.lambda = 0"));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn full_run_manifest_tampering_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    let out = caselink(runs, &["all", "--run-id", "a"], &["training.lambda=0"]);
    assert!(out.status.success(), "{}", stderr(&out));

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(runs.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["training.lambda"], "0");
    assert_eq!(manifest["seed"], 7);
    for stage in ["synth", "ingest", "summarize", "views", "casegnn", "graph", "train", "retrieve", "evaluate"] {
        assert!(manifest["stages"][stage]["chain"].is_string(), "{stage} not recorded");
    }
    assert!(!runs.join("a/.lock").exists());

    // Self-comparison: zero deltas, nothing significant.
    let m = runs.join("a/manifest.json");
    let report_path = runs.join("cmp.json");
    let out = Command::new(env!("CARGO_BIN_EXE_caselink"))
        .args(["compare", m.to_str().unwrap(), m.to_str().unwrap(), "--out", report_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let report: caselink_cli::CompareReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.metrics.iter().all(|m| m.delta == 0.0 && !m.test.significant));

    // Editing an upstream artifact blocks every downstream stage.
    let graph_file = runs.join("a/graph/test.json");
    let mut body = fs::read_to_string(&graph_file).unwrap();
    body.push(' ');
    fs::write(&graph_file, body).unwrap();
    for stage in ["train", "retrieve", "evaluate"] {
        let out = caselink(runs, &[stage, "--run-id", "a"], &["training.lambda=0"]);
        assert_eq!(out.status.code(), Some(2), "{stage}: {}", stderr(&out));
        assert!(stderr(&out).contains("`graph`"), "{}", stderr(&out));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_caselink"))
        .args(["compare", m.to_str().unwrap(), m.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Re-running the stage regenerates byte-identical artifacts, so the
    // chain hashes match again and downstream stages verify.
    let out = caselink(runs, &["graph", "--run-id", "a"], &["training.lambda=0"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = caselink(runs, &["retrieve", "--run-id", "a"], &["training.lambda=0"]);
    assert!(out.status.success(), "{}", stderr(&out));

    // A changed config key stales the stages that read it.
    let out = caselink(runs, &["retrieve", "--run-id", "a"], &["training.lambda=0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("`train`"), "{}", stderr(&out));
}

#[test]
fn held_lock_refuses_a_second_invocation() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("r")).unwrap();
    fs::write(dir.path().join("r/.lock"), "1").unwrap();
    let out = caselink(dir.path(), &["synth", "--run-id", "r"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = Command::new(env!("CARGO_BIN_EXE_caselink"))
        .args(["gradcheck", "--trials", "2", "--op", "deg_reg"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
}

#[test]
fn homogeneous_and_heterogeneous_runs_compare() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path();
    for (id, mode) in [("homo", "homogeneous"), ("hetero", "heterogeneous")] {
        let set = format!("graph.mode={mode}");
        let out = caselink(runs, &["all", "--run-id", id], &[set.as_str()]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let report = caselink_cli::compare_runs(&runs.join("homo/manifest.json"), &runs.join("hetero/manifest.json"), None).unwrap();
    assert_eq!(report.metrics.len(), 7);
    assert_eq!(report.comparisons, 7);
    for m in &report.metrics {
        assert!((m.delta - (m.a - m.b)).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&m.test.test.p_value));
    }

    // Different query sets cannot be compared.
    let out = caselink(runs, &["all", "--run-id", "other"], &["synth.queries_per_cluster=3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(caselink_cli::compare_runs(&runs.join("homo/manifest.json"), &runs.join("other/manifest.json"), None).is_err());
}
