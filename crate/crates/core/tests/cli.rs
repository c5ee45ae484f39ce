use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sample-attention"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SPEC: &str = r#"{"S": 512, "d": 32, "n_heads": 2, "sink_columns": [[0, 0.3]], "slash_offsets": [[0, 0.5]], "noise_scale": 0.3, "seed": 11}"#;

#[test]
fn run_writes_metrics_masks_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.json", SPEC);
    let out = dir.path().join("m.json");
    let mask = dir.path().join("m.blockmask");
    let heat = dir.path().join("mask.pgm");
    let probs = dir.path().join("p.pgm");
    let o = cli(&[
        "run", "--synthetic", &spec, "--alpha-c", "0.9", "--alpha-s", "0.9", "--chunks", "2",
        "--block", "64", "--oracle", "--out", out.to_str().unwrap(), "--mask", mask.to_str().unwrap(),
        "--heatmap", heat.to_str().unwrap(), "--prob-heatmap", probs.to_str().unwrap(), "--downsample", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(m["S"], 512);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["chunk_n"], 2);
    assert!(m["cra_full_min"].as_f64().unwrap() > 0.5);
    assert!(m["time.sparse_total"].is_number());
    let masks = sample_attention::BlockMask::parse_all(&std::fs::read_to_string(&mask).unwrap(), Some(512)).unwrap();
    assert_eq!(masks.len(), 2);
    assert!(std::fs::read(&heat).unwrap().starts_with(b"P5\n256 256\n255\n"));
    assert!(std::fs::read(&probs).unwrap().starts_with(b"P5\n256 256\n255\n"));
}

#[test]
fn run_is_deterministic_without_timings() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.json", SPEC);
    let a = cli(&["run", "--synthetic", &spec, "--oracle", "--no-timings", "--block", "64"]);
    let b = cli(&["run", "--synthetic", &spec, "--oracle", "--no-timings", "--block", "64"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn run_reads_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec: sample_attention::SyntheticSpec = serde_json::from_str(SPEC).unwrap();
    let heads = sample_attention::generate_synthetic(&spec).unwrap();
    let path = dir.path().join("h.qkv");
    sample_attention::save_tensors(&heads, &path).unwrap();
    let o = cli(&["run", "--input", path.to_str().unwrap(), "--block", "64"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["n_heads"], 2);
    assert!(m["seed"].is_null());
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.qkv", "QKV 1 1 4\n");
    let o = cli(&["run", "--input", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("byte"));
    let spec = write(dir.path(), "spec.json", SPEC);
    assert_eq!(cli(&["run", "--synthetic", &spec, "--alpha-c", "1.5"]).status.code(), Some(1));
    assert_eq!(cli(&["run"]).status.code(), Some(1));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["--help"]).status.code(), Some(0));
}

#[test]
fn tune_then_bench() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write(
        dir.path(),
        "grid.json",
        r#"{"alphas_c": [0.9, 0.95], "alphas_s": [0.9, 0.95], "chunk_ns": [1, 2], "blk": 64,
            "task": {"S": 512, "d": 32, "sink_columns": [[0, 0.3]], "slash_offsets": [[0, 0.5]], "noise_scale": 0.3, "seed": 1}}"#,
    );
    let tuned = dir.path().join("tuned.json");
    let o = cli(&[
        "tune", "--grid", &grid, "--recall-target", "0.8", "--lengths", "256,512", "--trials", "1",
        "--out", tuned.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: sample_attention::TuneReport =
        serde_json::from_str(&std::fs::read_to_string(&tuned).unwrap()).unwrap();
    assert_eq!(report.ranges.len(), 2);
    assert_eq!(report.ranges[0].cells.len(), 8);

    let spec = write(dir.path(), "spec.json", SPEC);
    let o = cli(&["bench", "--synthetic", &spec, "--config", tuned.to_str().unwrap(), "--repeat", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let b: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(b["speedup"].as_f64().unwrap() > 0.0);
    assert_eq!(b["repeat"], 2);

    let plain = write(dir.path(), "cfg.json", r#"{"alpha_c": 0.9, "alpha_s": 0.9, "chunk_n": 1, "blk": 64}"#);
    assert!(cli(&["bench", "--synthetic", &spec, "--config", &plain]).status.success());
}

#[test]
fn infeasible_tuning_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let grid = write(dir.path(), "grid.json", r#"{"alphas_c": [0.3], "alphas_s": [0.3], "chunk_ns": [1], "blk": 64}"#);
    let task = write(dir.path(), "task.json", SPEC);
    let out = dir.path().join("t.json");
    let o = cli(&[
        "tune", "--grid", &grid, "--synthetic", &task, "--recall-target", "1.0", "--lengths", "512",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.exists());
}

#[test]
fn sparsity_table() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "spec.json", SPEC);
    let o = cli(&["sparsity", "--synthetic", &spec, "--alpha", "0.95", "--lengths", "256,512"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "S,head,minimal_mass_fraction,sparsity");
    assert_eq!(lines.len(), 1 + 2 * 2);
    assert!(lines[1].starts_with("256,0,"));
}
