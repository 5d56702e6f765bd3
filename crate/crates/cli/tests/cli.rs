use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use branchlora::config::ExperimentConfig;

const BIN: &str = env!("CARGO_BIN_EXE_branchlora");

fn small_config() -> String {
    let mut cfg = ExperimentConfig {
        seeds: vec![0],
        timing_batches: 5,
        ..ExperimentConfig::default()
    };
    cfg.stream.tasks = 3;
    cfg.stream.train_per_task = 96;
    cfg.stream.test_per_task = 48;
    cfg.stream.dim = 16;
    cfg.training.epochs = 3;
    cfg.to_json()
}

fn branchlora(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("BRANCHLORA_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_run(dir: &Path, extra: &[&str]) -> Output {
    let cfg = dir.join("config_in.json");
    fs::write(&cfg, small_config()).unwrap();
    let out = dir.join("run");
    let mut args = vec![
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    branchlora(&args)
}

#[test]
fn run_writes_reports_ledger_timings_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let o = small_run(tmp.path(), &["--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("run");
    for f in [
        "report.json",
        "report.csv",
        "ledger.json",
        "timings.json",
        "config.json",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for t in 0..3 {
        assert!(out
            .join(format!("checkpoints/3/branchlora/task_{t}"))
            .is_dir());
    }
    assert!(out.join("checkpoints/3/multitask/task_2").is_dir());
    let ledger: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["seeds"][0]["seed"], 3);
}

#[test]
fn output_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, small_config()).unwrap();
    let env_out = tmp.path().join("from_env");
    let o = Command::new(BIN)
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("BRANCHLORA_OUTPUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(env_out.join("report.json").is_file());
}

#[test]
fn malformed_config_exits_2_with_location() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\"seeds\": [0,\n  oops }").unwrap();
    let o = branchlora(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]:"), "{err}");
    assert!(err.contains("line 2"), "{err}");
    assert!(!tmp.path().join("x").exists());
}

#[test]
fn invalid_field_reports_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    let mut bad = ExperimentConfig::default();
    bad.stream.classes = 1;
    fs::write(&cfg, bad.to_json()).unwrap();
    let o = branchlora(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stream.classes"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = branchlora(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"));
}

#[test]
fn same_seed_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(small_run(a.path(), &["--seed", "7"]).status.success());
    assert!(small_run(b.path(), &["--seed", "7", "--jobs", "1"])
        .status
        .success());
    for f in ["report.json", "report.csv", "ledger.json", "config.json"] {
        let x = fs::read(a.path().join("run").join(f)).unwrap();
        let y = fs::read(b.path().join("run").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn analyze_reports_margin_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(small_run(tmp.path(), &["--seed", "1", "--seed", "2"])
        .status
        .success());
    let run = tmp.path().join("run");
    let o = branchlora(&["analyze", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read_all = || {
        ["similarity.json", "efficiency.csv", "vectors.csv"].map(|f| fs::read(run.join(f)).unwrap())
    };
    let first = read_all();
    let sim: serde_json::Value = serde_json::from_slice(&first[0]).unwrap();
    assert!(sim["median_margin"].as_f64().unwrap().is_finite());
    assert_eq!(sim["seeds"].as_array().unwrap().len(), 2);
    let eff = String::from_utf8(first[1].clone()).unwrap();
    assert!(eff.lines().count() >= 2);
    let vectors = String::from_utf8(first[2].clone()).unwrap();
    assert_eq!(
        vectors.lines().filter(|l| l.starts_with("seed,")).count(),
        1
    );

    assert!(branchlora(&["analyze", run.to_str().unwrap()])
        .status
        .success());
    assert_eq!(first, read_all());
}

#[test]
fn analyze_of_empty_dir_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let o = branchlora(&["analyze", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 0);
}

#[test]
fn report_prints_table_and_taskwise_csv() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(small_run(tmp.path(), &[]).status.success());
    let report = tmp.path().join("run/report.json");
    let out = tmp.path().join("rep");
    let o = branchlora(&[
        "report",
        report.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    let tasks = 3;
    let final_rows: Vec<&str> = table.lines().filter(|l| l.contains("A[T][i]")).collect();
    assert_eq!(final_rows.len(), 5);
    for row in final_rows {
        let numbers = row
            .split_whitespace()
            .filter(|w| w.parse::<f64>().is_ok())
            .count();
        assert_eq!(numbers, tasks + 3, "{row}");
    }
    let csv = fs::read_to_string(out.join("taskwise_maa.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,after_task,mean_seen_accuracy"));
    assert_eq!(lines.count(), 5 * tasks);
}

#[test]
fn report_schema_error_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(small_run(tmp.path(), &[]).status.success());
    let path = tmp.path().join("run/report.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    v["seeds"][0]["methods"][1]["metrics"]
        .as_object_mut()
        .unwrap()
        .remove("bwt");
    let broken = tmp.path().join("broken.json");
    fs::write(&broken, serde_json::to_string(&v).unwrap()).unwrap();
    let o = branchlora(&["report", broken.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("seeds[0].methods[1].metrics"), "{err}");
    assert!(err.contains("bwt"), "{err}");
}
