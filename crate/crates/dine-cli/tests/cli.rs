//! End-to-end checks of the command-line surface: exit codes, file formats,
//! config overrides, and run-to-run determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dine"))
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("dine_cli_tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not json ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn unknown_flags_exit_2_with_usage() {
    let out = run(&["capacity", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage") || err.contains("usage"), "{err}");
}

#[test]
fn missing_channel_is_a_config_error() {
    let out = run(&["capacity", "--power", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_channel_parameter_is_a_config_error() {
    let out = run(&["baseline", "--channel", "ma1", "--alpha", "1.5", "--power", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn baseline_alpha_zero_feedback_equals_awgn() {
    let out = run(&[
        "baseline", "--channel", "ma1", "--alpha", "0.0", "--power", "1", "--feedback",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    let c = json["capacity_nats"].as_f64().unwrap();
    assert!((c - 0.346_573_590_279_972_64).abs() < 1e-9);
    assert_eq!(json["method"], "quartic_root");
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = run(&["gradcheck", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max rel-error"));
}

#[test]
fn simulate_writes_ingestible_trajectories() {
    let dir = tmp_dir("simulate");
    let out = run(&[
        "simulate",
        "--channel",
        "ma1",
        "--alpha",
        "0.5",
        "--steps",
        "200",
        "--trajectories",
        "2",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "traj,t,x0,y0");
    assert_eq!(csv.lines().count(), 1 + 2 * 200);
}

fn small_capacity_args<'a>(dir: &'a Path, seed: &'a str) -> Vec<&'a str> {
    vec![
        "capacity",
        "--channel",
        "awgn",
        "--power",
        "1",
        "--estimator",
        "mine",
        "--seed",
        seed,
        "--steps",
        "40",
        "--batch-size",
        "8",
        "--seq-len",
        "16",
        "--eval-n",
        "2000",
        "--eval-block",
        "500",
        "--out",
        dir.to_str().unwrap(),
    ]
}

#[test]
fn capacity_writes_report_and_curve_with_expected_schema() {
    let dir = tmp_dir("capacity_schema");
    let out = run(&small_capacity_args(&dir, "7"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for key in [
        "estimate_nats",
        "stderr",
        "n_eval",
        "baseline_nats",
        "channel",
        "config",
        "seed",
        "runtime_s",
    ] {
        assert!(report.get(key).is_some(), "missing report key {key}");
    }
    assert_eq!(report["seed"], 7);
    assert!((report["baseline_nats"].as_f64().unwrap() - 0.346_573_590_279_972_64).abs() < 1e-9);
    // the config echo carries resolved defaults
    assert_eq!(report["config"]["k_u"], 16);
    assert_eq!(report["config"]["steps"], 40);

    let curve = std::fs::read_to_string(dir.join("curve.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), "step,d_hat_y,d_hat_yx,estimate_nats");
    assert_eq!(curve.lines().count(), 1 + 40);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir_a = tmp_dir("det_a");
    let dir_b = tmp_dir("det_b");
    let a = run(&small_capacity_args(&dir_a, "11"));
    let b = run(&small_capacity_args(&dir_b, "11"));
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(b.status.code(), Some(0));
    let curve_a = std::fs::read(dir_a.join("curve.csv")).unwrap();
    let curve_b = std::fs::read(dir_b.join("curve.csv")).unwrap();
    assert_eq!(curve_a, curve_b, "curve files differ between identical runs");

    let dir_c = tmp_dir("det_c");
    let c = run(&small_capacity_args(&dir_c, "12"));
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(
        curve_a,
        std::fs::read(dir_c.join("curve.csv")).unwrap(),
        "different seeds must differ"
    );
}

#[test]
fn config_file_is_honored_and_flags_override_it() {
    let dir = tmp_dir("config_override");
    let cfg_path = dir.join("run.toml");
    std::fs::write(
        &cfg_path,
        r#"
mode = "capacity"
estimator = "mine"
steps = 25
batch_size = 8
seq_len = 16
eval_n = 2000
eval_block = 500
seed = 5

[channel]
kind = "awgn"
sigma2 = 1.0
dim = 1

[constraint]
kind = "average_power"
power = 1.0
amplitude = 1.0
"#,
    )
    .unwrap();
    let out = run(&[
        "capacity",
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "30",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["steps"], 30, "flag must override file");
    assert_eq!(report["config"]["seed"], 5, "file value must survive");
}

#[test]
fn estimate_ingests_simulated_data_and_reports() {
    let dir = tmp_dir("estimate_roundtrip");
    let sim = run(&[
        "simulate",
        "--channel",
        "awgn",
        "--steps",
        "4000",
        "--seed",
        "2",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(sim.status.code(), Some(0));
    let dataset = dir.join("trajectories.csv");
    let out = run(&[
        "estimate",
        "--dataset",
        dataset.to_str().unwrap(),
        "--estimator",
        "mine",
        "--steps",
        "60",
        "--batch-size",
        "8",
        "--seq-len",
        "16",
        "--eval-n",
        "4000",
        "--eval-block",
        "1000",
        "--seed",
        "4",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json = stdout_json(&out);
    assert!(json["estimate_nats"].as_f64().unwrap().is_finite());
    assert!(json["baseline_nats"].is_null(), "no baseline in estimate mode");
}

#[test]
fn estimate_rejects_malformed_dataset_with_line_number() {
    let dir = tmp_dir("bad_dataset");
    let path = dir.join("bad.csv");
    std::fs::write(&path, "traj,t,x0,y0\n0,0,1.0,2.0\n0,1,oops,2.0\n").unwrap();
    let out = run(&["estimate", "--dataset", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "error should cite the line: {err}");
}

#[test]
fn save_params_writes_a_loadable_checkpoint() {
    let dir = tmp_dir("save_params");
    let ckpt = dir.join("params.json");
    let mut args = small_capacity_args(&dir, "9");
    args.push("--save-params");
    args.push(ckpt.to_str().unwrap());
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ckpt).unwrap()).unwrap();
    assert_eq!(json["format_version"], 1);
    assert!(json["params"].as_array().unwrap().len() > 4);
}
