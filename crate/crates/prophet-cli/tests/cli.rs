//! End-to-end runs of the `prophet` binary.

use std::path::Path;
use std::process::{Command, Output};

fn prophet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prophet"))
        .args(args)
        .output()
        .expect("spawn prophet")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

const SMALL: &str = "[workload]\nn_txns = 40\nn_contracts = 60\n";

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sim]\nshard_count = 4\n");
    let out_path = dir.path().join("out.csv");
    let out = prophet(&["run", "--config", &cfg, "--out", out_path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("shard_count"), "{stderr}");
}

#[test]
fn csv_has_one_row_block_per_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_path = dir.path().join("out.csv");
    let history = dir.path().join("history.csv");
    let out = prophet(&[
        "run", "--config", &cfg, "--mechanism", "prophet", "--shards", "2,4", "--seed", "3",
        "--ordering", "rwdep,reorder", "--out", out_path.to_str().unwrap(),
        "--history", history.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("kind,mechanism"), "{header}");
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let shards_col = reader.headers().unwrap().iter().position(|c| c == "n_shards").unwrap();
    let shards: std::collections::BTreeSet<String> = reader
        .records()
        .map(|r| r.unwrap()[shards_col].to_string())
        .collect();
    assert_eq!(shards.into_iter().collect::<Vec<_>>(), ["2", "4"]);
    let history = std::fs::read_to_string(history).unwrap();
    assert!(history.starts_with("round,position,txn_id,status,confirm_time_ms"));
    assert!(history.lines().filter(|l| l.contains(",confirmed,")).count() >= 40);
}

#[test]
fn json_output_parses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out_path = dir.path().join("out.json");
    for mech in ["occ", "2pl"] {
        let out = prophet(&[
            "run", "--config", &cfg, "--mechanism", mech, "--shards", "3", "--seed", "1,2",
            "--format", "json", "--out", out_path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
        assert_eq!(value.as_array().unwrap().len(), 2);
    }
}

#[test]
fn trace_from_gen_trace_drives_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let trace = dir.path().join("w.trace");
    let out = prophet(&["gen-trace", "--config", &cfg, "--seed", "9", "--out", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = write_config(dir.path(), &format!("trace_file = {:?}\n", trace.to_str().unwrap()));
    let out_path = dir.path().join("out.csv");
    let out = prophet(&["run", "--config", &cfg, "--shards", "2", "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn security_table_prints_minimum_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[sim]\nn_shards = 16\nnodes_per_shard = 50\n");
    let out = prophet(&["security", "--config", &cfg, "--sizes", "100,600"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("shard_size,failure_probability,meets_target"));
    assert!(stdout.contains("min_shard_size="));
    assert!(stdout.lines().any(|l| l.starts_with("600,")), "{stdout}");
}
