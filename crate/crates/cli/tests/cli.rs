use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use s3c::config::KeyValues;
use s3c::data::load_dataset;
use s3c::evaluation::{harmonic_mean, MetricsReport};
use s3c::head::StochasticHead;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn s3c(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3c"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = s3c(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a dataset with `classes` classes and returns its path.
fn dataset(dir: &TempDir, classes: usize) -> PathBuf {
    let path = dir.path().join(format!("data{classes}.s3cd"));
    let n = classes.to_string();
    ok(&[
        "gen-data",
        "--classes",
        &n,
        "--train",
        "10",
        "--test",
        "4",
        "--size",
        "8",
        "--seed",
        "3",
        "-o",
        p(&path),
    ]);
    path
}

const QUICK: [&str; 4] = ["--set", "base_epochs=3", "--set", "inc_epochs=3"];

fn run(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--data", p(data), "-o", p(out), "--seed", "1"];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    s3c(&args)
}

fn manifest(dir: &Path) -> KeyValues {
    KeyValues::parse(&fs::read_to_string(dir.join("manifest.txt")).unwrap()).unwrap()
}

fn metrics(dir: &Path) -> MetricsReport {
    MetricsReport::from_csv(&fs::read_to_string(dir.join("metrics.csv")).unwrap()).unwrap()
}

#[test]
fn gen_data_counts_and_repeats_byte_for_byte() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.s3cd");
    let b = dir.path().join("b.s3cd");
    let out = ok(&["gen-data", "--seed", "7", "-o", p(&a)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("700 samples"));
    ok(&["gen-data", "--seed", "7", "-o", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.class_count, 10);
    assert_eq!(ds.train.len(), 500);
    assert_eq!(ds.test.len(), 200);
}

#[test]
fn missing_output_is_a_usage_error() {
    let out = s3c(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("-o"));

    let out = s3c(&["run", "--data", "nowhere.s3cd"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_setting_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 18);
    let out = run(&data, &dir.path().join("r"), &["--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&dir.path().join("absent.s3cd"), &dir.path().join("r"), &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn nine_session_run_writes_a_complete_directory() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 26);
    let r = dir.path().join("run");
    let out = run(&data, &r, &["--set", "tasks=8"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    for f in [
        "manifest.txt",
        "config.txt",
        "loss.csv",
        "metrics.csv",
        "backbone.s3cb",
        "head.s3ch",
        "prototypes.s3cp",
    ] {
        assert!(r.join(f).is_file(), "{f} missing");
    }
    let m = manifest(&r);
    assert_eq!(m.get("status"), Some("complete"));
    assert_eq!(m.get("sessions_planned"), Some("9"));
    assert_eq!(m.get("sessions_completed"), Some("9"));
    let config = fs::read(r.join("config.txt")).unwrap();
    let hash: String = Sha256::digest(&config)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    assert_eq!(m.get("config_hash"), Some(hash.as_str()));

    let report = metrics(&r);
    assert_eq!(report.sessions.len(), 9);
    assert!(report.pd().is_some());
    let head = StochasticHead::load(r.join("head.s3ch")).unwrap();
    assert_eq!(head.class_count(), 26);
    assert_eq!(head.task_count(), 9);
    assert_eq!(head.rotations(), 4);

    let loss = fs::read_to_string(r.join("loss.csv")).unwrap();
    assert!(loss.starts_with("session,epoch,split,loss\n"));
    assert_eq!(loss.lines().filter(|l| l.starts_with("8,")).count(), 3);
}

#[test]
fn linear_head_ablation_stores_a_deterministic_single_rotation_head() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 18);
    let r = dir.path().join("lin");
    let out = run(&data, &r, &["--ablation", "linear-head"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let head = StochasticHead::load(r.join("head.s3ch")).unwrap();
    assert_eq!(head.rotations(), 1);
    assert!(!head.is_stochastic());
    assert!(head.variances().iter().all(|&v| v == 0.0));
    let config = KeyValues::parse(&fs::read_to_string(r.join("config.txt")).unwrap()).unwrap();
    assert_eq!(config.get("stochastic"), Some("false"));
    assert_eq!(config.get("rotations"), Some("1"));
}

#[test]
fn imbalanced_variant_uses_the_shot_list() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 30);
    let r = dir.path().join("im");
    let out = run(&data, &r, &["--variant", "im", "--set", "ways=5"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let config = KeyValues::parse(&fs::read_to_string(r.join("config.txt")).unwrap()).unwrap();
    assert_eq!(config.get("variant"), Some("im"));
    let report = metrics(&r);
    assert_eq!(report.sessions.len(), 5);
    // five new classes per task, every test image of them evaluated
    let last = report.sessions.last().unwrap();
    assert_eq!(last.per_task.len(), 5);
    assert!(last.per_task[1..].iter().all(|t| t.total == 5 * 4));
}

#[test]
fn diverging_training_exits_with_abort_code() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 18);
    let r = dir.path().join("boom");
    let out = run(&data, &r, &["--set", "base_lr=1e300"]);
    assert_eq!(out.status.code(), Some(4));
    let m = manifest(&r);
    assert_eq!(m.get("status"), Some("failed"));
    assert!(m.get("error").unwrap().contains("aborted"));
}

#[test]
fn report_needs_metrics() {
    let dir = TempDir::new().unwrap();
    let out = s3c(&["report", p(dir.path())]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn report_compares_runs_and_matches_the_metrics() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 18);
    let a = dir.path().join("s3c");
    let b = dir.path().join("linear");
    assert!(run(&data, &a, &[]).status.success());
    assert!(run(&data, &b, &["--ablation", "linear-head"])
        .status
        .success());

    let text = ok(&["report", p(&a), p(&b)]);
    let text = String::from_utf8(text.stdout).unwrap();
    assert!(text.contains("s3c") && text.contains("linear"));

    let csv1 = dir.path().join("cmp1.csv");
    let csv2 = dir.path().join("cmp2.csv");
    ok(&["report", p(&a), p(&b), "--csv", "-o", p(&csv1)]);
    ok(&["report", p(&a), p(&b), "--csv", "-o", p(&csv2)]);
    let body = fs::read_to_string(&csv1).unwrap();
    assert_eq!(body, fs::read_to_string(&csv2).unwrap());

    // the final hm cells equal the harmonic mean recomputed from counts
    let reports = [metrics(&a), metrics(&b)];
    let hm_row = body
        .lines()
        .rfind(|l| l.starts_with("hm,"))
        .expect("hm rows");
    let cells: Vec<&str> = hm_row.split(',').skip(2).collect();
    assert_eq!(cells.len(), 2);
    for (cell, report) in cells.iter().zip(&reports) {
        let last = report.sessions.last().unwrap();
        let want = harmonic_mean(last.base, last.new.unwrap());
        assert_eq!(*cell, format!("{:.2}", 100.0 * want));
    }
}

#[test]
fn eval_reproduces_the_final_session() {
    let dir = TempDir::new().unwrap();
    let data = dataset(&dir, 18);
    let r = dir.path().join("run");
    assert!(run(&data, &r, &[]).status.success());
    let out_csv = dir.path().join("eval.csv");
    let out = ok(&["eval", p(&r), "-o", p(&out_csv)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("top-1"));

    let reeval = MetricsReport::from_csv(&fs::read_to_string(&out_csv).unwrap()).unwrap();
    let last = metrics(&r).sessions.last().cloned().unwrap();
    assert_eq!(reeval.sessions.last(), Some(&last));
}
