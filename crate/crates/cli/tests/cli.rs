use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_txnaccel"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn basic_config_runs_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = configs().join("basic-4c4l-4a8t.toml");
    let o = run(&["run", "--config", s(&cfg), "--out-dir", s(&out), "--verify"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "metrics.json", "history.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("4,8,4,4,65536,"));

    let v = run(&["verify", s(&out.join("history.txt"))]);
    assert_eq!(code(&v), 0, "{}", stderr(&v));
    let json: serde_json::Value = serde_json::from_slice(&v.stdout).unwrap();
    assert_eq!(json["serializable"], true);
    assert_eq!(json["committed"], 1600);
}

#[test]
fn same_seed_same_history() {
    let dir = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("r{k}"));
        let o = run(&["run", "--txn-agents", "2", "--txns-per-agent", "50", "--seed", "11", "--out-dir", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        hashes.push(std::fs::read(out.join("history.txt")).unwrap());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn bad_table_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["run", "--table-size", "3", "--out-dir", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("error: code=2 kind=config msg="), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[system]\nchanels = 4\n").unwrap();
    let o = run(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("chanels"));
}

#[test]
fn missing_file_is_io_error() {
    let o = run(&["verify", "/definitely/not/here.txt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("kind=io"));
}

#[test]
fn generate_then_validate_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.txt");
    let o = run(&["generate", "--txn-agents", "2", "--txns-per-agent", "20", "--warehouses", "2", "--out", s(&trace)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&run(&["validate", s(&trace)])), 0);
    let o = run(&["run", "--trace", s(&trace), "--txn-agents", "2", "--out-dir", s(&dir.path().join("r")), "--verify"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn invalid_trace_lists_violations() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bad.txt");
    std::fs::write(&trace, "#txnaccel-trace v1\n1 5:Q\n2 5:X\n3 5:IS@40+64\n").unwrap();
    let o = run(&["validate", s(&trace)]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("line 2") && err.contains("line 3") && err.contains("line 4"), "{err}");
}

#[test]
fn non_serializable_history_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    // lost update: both read before either writes
    std::fs::write(
        &h,
        "1 0 1 R 7 7 1c0 0\n2 0 2 R 7 7 1c0 0\n3 0 1 W 7 7 1c0 1\n4 0 2 W 7 7 1c0 2\n5 0 1 C\n6 0 2 C\n",
    )
    .unwrap();
    let o = run(&["verify", s(&h)]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(json["serializable"], false);
    assert_eq!(json["cycle"].as_array().unwrap().len(), 2);

    std::fs::write(&h, "garbage\n").unwrap();
    assert_eq!(code(&run(&["verify", s(&h)])), 3);
}

#[test]
fn sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("sweep.toml");
    std::fs::write(
        &spec,
        r#"
[system]
txns_per_agent = 30
[workload]
warehouses = 4
[sweep]
seeds = [0, 1, 2]
verify = true
axes = [{ name = "txn_setting", values = ["1A1T", "1A4T"] }]
[[expect]]
kind = "ratio_at_least"
name = "slots help"
q = { metric = "txn_per_s", stat = "avg" }
num = "1A4T"
den = "1A1T"
ratio = 1.2
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = run(&["sweep", s(&spec), "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 7);
    let agg = std::fs::read_to_string(out.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 3);
    assert!(std::fs::read_to_string(out.join("trends.txt")).unwrap().contains("PASS"));

    let o = run(&["report", s(&out.join("runs.csv")), "--expect", s(&spec)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("1A4T") && text.contains("slots help"));

    // too few seeds
    std::fs::write(&spec, "[sweep]\nseeds = [0]\n").unwrap();
    assert_eq!(code(&run(&["sweep", s(&spec), "--out-dir", s(&out)])), 2);
}
