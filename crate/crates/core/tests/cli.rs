use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"
[run]
method = "fedepa"
rounds = 2
lr = 0.05
align_lr = 3e-4
lr_w = 1000.0

[data]
samples_per_class = 40
clients = 3
"#;

fn fedepa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedepa")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report_without_timing(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs").expect("timing field");
    v
}

#[test]
fn run_writes_a_reproducible_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fedepa(&["run", "--config", s(&cfg), "--out-dir", s(out), "--override", "method=fedavg"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("fedavg seed 0: OA "));
    }
    let report = report_without_timing(&a.join("report.json"));
    assert_eq!(report["method"], "fedavg");
    assert_eq!(report["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(report, report_without_timing(&b.join("report.json")));

    // the written config reproduces the run
    let o = fedepa(&["run", "--config", s(&a.join("config.toml")), "--out-dir", s(&dir.path().join("c"))]);
    assert!(o.status.success());
    assert_eq!(report, report_without_timing(&dir.path().join("c/report.json")));
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = fedepa(&["run", "--config", s(&dir.path().join("nope.toml"))]);
    assert_eq!(missing.status.code(), Some(2));

    let empty_axis = write_config(dir.path(), &format!("{SMALL}\n[sweep]\nmethods = []\n"));
    assert_eq!(fedepa(&["sweep", "--config", s(&empty_axis)]).status.code(), Some(2));

    let bad_key = fedepa(&["run", "--override", "run.no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(2));

    // full-size benchmark: a huge step overflows within the first rounds
    let diverge = fedepa(&["run", "--override", "rounds=2", "--override", "lr=1e6"]);
    assert_eq!(diverge.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&diverge.stderr).contains("non-finite"));

    let cfg = write_config(dir.path(), SMALL);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let bad_out = fedepa(&["dump-embeddings", "--config", s(&cfg), "--out", s(&blocker.join("x.csv"))]);
    assert_eq!(bad_out.status.code(), Some(4));
}

#[test]
fn dump_embeddings_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for out in [&a, &b] {
        let o = fedepa(&["dump-embeddings", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());

    let mut reader = csv::Reader::from_path(&a).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "label");
    // full fusion with d = 16: the attended aligned half plus three context halves
    assert_eq!(header.len(), 1 + 16 * 4);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert!(!rows.is_empty());
    for row in &rows {
        assert_eq!(row.len(), header.len());
        assert!(row[0].parse::<usize>().unwrap() < 5);
        assert!(row.iter().skip(1).all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
}

#[test]
fn sweep_writes_cells_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("{SMALL}\n[sweep]\nmethods = [\"fedavg\", \"fedepa\"]\nseeds = [0, 1]\n"),
    );
    let out = dir.path().join("sweep");
    let o = fedepa(&["sweep", "--config", s(&cfg), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let cells: Vec<_> = std::fs::read_dir(out.join("cells")).unwrap().collect();
    assert_eq!(cells.len(), 4);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let rows = summary.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["method"], "fedavg");
    assert_eq!(rows[3]["method"], "fedepa");
    assert!(rows.iter().all(|r| r["status"] == "ok" && r["oa"].is_f64()));

    let mut reader = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    assert_eq!(reader.records().count(), 4);
}

#[test]
fn selftest_passes() {
    let o = fedepa(&["selftest"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().count() >= 4);
    assert!(!stdout.contains("FAIL"));
}
