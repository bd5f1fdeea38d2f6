use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use seqhems::pipeline::ExperimentConfig;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seqhems"));
    c.env("RUST_LOG", "warn");
    c
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn smoke(dir: &Path) -> PathBuf {
    let cfg = ExperimentConfig {
        output_dir: "out".into(),
        data: seqhems::pipeline::config::DataConfig {
            path: "data.csv".into(),
            ..ExperimentConfig::smoke().data
        },
        ..ExperimentConfig::smoke()
    };
    write_config(dir, &cfg)
}

fn run(config: &Path, args: &[&str]) -> Output {
    bin().arg("--config").arg(config).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_runs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    for stage in ["synth-data", "ingest", "train-forecasters", "dispatch", "report"] {
        let o = run(&cfg, &[stage, "--jobs", "2"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    for f in [
        "ingest/manifest.json",
        "models/seq2seq.ckpt",
        "models/varma.json",
        "forecast/wmape.csv",
        "forecast/trace_lstm.csv",
        "dispatch/operations.csv",
        "dispatch/profit_curves.csv",
        "report/summary.json",
        "report/summary.md",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let wmape = std::fs::read_to_string(out.join("forecast/wmape.csv")).unwrap();
    let header = wmape.lines().next().unwrap();
    assert_eq!(header, "channel,varma,lstm,seq2seq,persistence,best");
    assert_eq!(wmape.lines().count(), 1 + 6 + 1);
    let ops = std::fs::read_to_string(out.join("dispatch/operations.csv")).unwrap();
    assert!(ops.starts_with("day,forecaster,predicted_profit,actual_profit,optimal_profit\n"));

    // Deleting every intermediate artifact and re-running reproduces the
    // outputs byte for byte, single-threaded this time.
    let first = snapshot(&out);
    std::fs::remove_dir_all(&out).unwrap();
    for stage in ["ingest", "train-forecasters", "dispatch", "report"] {
        let o = run(&cfg, &[stage]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert_eq!(snapshot(&out), first);
}

#[test]
fn second_ingest_is_a_cache_hit_with_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    assert!(run(&cfg, &["synth-data"]).status.success());
    let a = run(&cfg, &["ingest"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("written"));
    let before = snapshot(&dir.path().join("out"));
    let b = run(&cfg, &["ingest"]);
    assert!(stdout(&b).contains("cache hit"), "{}", stdout(&b));
    assert_eq!(snapshot(&dir.path().join("out")), before);
}

#[test]
fn missing_data_file_is_a_runtime_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let o = run(&cfg, &["ingest"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.csv"), "{}", stderr(&o));
}

#[test]
fn invalid_split_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::smoke();
    cfg.preprocess.split.train_frac = 0.8;
    let path = write_config(dir.path(), &cfg);
    let o = run(&path, &["ingest"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid configuration"), "{}", stderr(&o));
}

#[test]
fn empty_day_list_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::smoke();
    cfg.dispatch.day_list = Some(Vec::new());
    let path = write_config(dir.path(), &cfg);
    assert_eq!(run(&path, &["report"]).status.code(), Some(1));
}

#[test]
fn report_without_dispatch_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let out = dir.path().join("out/forecast");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("metrics.json"), r#"{"eval_windows":0,"reports":[]}"#).unwrap();
    let o = run(&cfg, &["report"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`dispatch`"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_and_bad_jobs_exit_with_one() {
    let o = bin().args(["ingest", "--bogus"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    assert_eq!(run(&cfg, &["ingest", "--jobs", "0"]).status.code(), Some(1));
}

#[test]
fn init_config_round_trips_through_the_loader() {
    let o = bin().arg("init-config").output().unwrap();
    assert!(o.status.success());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, &o.stdout).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default());
}

#[test]
fn seed_flag_changes_the_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    assert!(run(&cfg, &["synth-data", "--seed", "1"]).status.success());
    let a = std::fs::read(dir.path().join("data.csv")).unwrap();
    assert!(run(&cfg, &["synth-data", "--seed", "2"]).status.success());
    let b = std::fs::read(dir.path().join("data.csv")).unwrap();
    assert_ne!(a, b);
}
