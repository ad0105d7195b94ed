use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[population]
peers = 40
superpeers = 2
sources = 1

[metrics]
trace_count = 2

[run]
duration = 30.0
seed = 4
"#;

fn p2ptv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_p2ptv")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("scenario.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON: {line}: {e}"))
}

#[test]
fn run_writes_snapshots_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("out");
    let out = p2ptv(&["run", "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean_dg="));
    let snapshots = fs::read_to_string(out_dir.join("snapshots.csv")).unwrap();
    let mut lines = snapshots.lines();
    assert_eq!(
        lines.next(),
        Some("time,mean_dg_peers,mean_ug_peers,mean_dg_all,mean_ug_all,alive_peers,suspended")
    );
    assert_eq!(lines.count(), 30);
    let traces: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("trace_"))
        .collect();
    assert_eq!(traces.len(), 2);
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let mut contents = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = p2ptv(&["run", "--config", &config, "--seed", "9", "--events", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success());
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        contents.push(files);
    }
    assert!(contents[0].iter().any(|(n, _)| n == "events.log"));
    assert_eq!(contents[0], contents[1]);
}

#[test]
fn sweep_writes_one_row_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out_dir = dir.path().join("sweep");
    let out = p2ptv(&[
        "sweep", "--config", &config, "--param", "N", "--values", "2,4,8", "--reps", "2", "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param_name,param_value,replication,seed,mean_dg,mean_ug");
    assert_eq!(lines.len(), 7);
    let values: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values, ["2.0", "2.0", "4.0", "4.0", "8.0", "8.0"]);
}

#[test]
fn invalid_config_reports_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[population]\nsources = 0\n");
    let out = p2ptv(&["run", "--config", &config]);
    assert!(!out.status.success());
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "validation");
    assert!(err["error"]["message"].as_str().unwrap().contains("sources"));
}

#[test]
fn parse_errors_carry_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[run]\nseed = 1\nseed = 2\n");
    let out = p2ptv(&["run", "--config", &config]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "parse");
    assert!(err["error"]["message"].as_str().unwrap().contains("line 3"));
}

#[test]
fn missing_file_and_bad_arguments_fail_cleanly() {
    let out = p2ptv(&["run", "--config", "/nonexistent/scenario.toml"]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = p2ptv(&["sweep", "--config", &config, "--param", "R", "--values", "1"]);
    assert!(!out.status.success());
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let out = p2ptv(&["run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}
