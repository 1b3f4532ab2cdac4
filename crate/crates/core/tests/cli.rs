//! The `aer` binary: exit codes, output layout and overrides.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "[run]\nname = \"tiny\"\nseeds = [0]\ndiversity = false\n\n\
[data]\nclasses = 4\ndims = 6\nper_class = 40\ntasks = 2\n\n\
[train]\nmethod = \"aer_abs\"\nbuffer_size = 20\nepochs = 2\nhidden = [8]\nbatch_size = 16\n";

fn aer(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aer"));
    cmd.args(args).env_remove("AER_OUTPUT_ROOT");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn aer")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    aer(&args, &[])
}

#[test]
fn minimal_config_writes_one_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2, "{summary}");
    assert!(lines[0].starts_with("method,noise_kind,noise_rate,seeds,faa_mean"));
    assert!(lines[1].starts_with("aer_abs,symmetric,"));
    for f in ["manifest.json", "seed-0/accuracy.json", "seed-0/trace.csv", "seed-0/noise.json", "seed-0/buffer-task1.jsonl"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn rerun_gives_identical_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &[]).status.success());
    let read = |p: &Path| std::fs::read(p.join("summary.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let trace = |p: &Path| std::fs::read(p.join("seed-0/trace.csv")).unwrap();
    assert_eq!(trace(&a), trace(&b));
}

#[test]
fn missing_csv_exits_with_io_code_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[data]\nsource = \"csv\"\npath = \"nowhere.csv\"\n");
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn invalid_field_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[train]\nalpha = 140\n");
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.alpha"), "{}", stderr(&o));

    let cfg = write_config(dir.path(), "d.toml", "[train]\nepoch = 3\n");
    let o = run(&cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let root = dir.path().join("root");
    let o = aer(&["run", "--config", cfg.to_str().unwrap()], &[("AER_OUTPUT_ROOT", &root)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(root.join("tiny/summary.csv").is_file());
}

#[test]
fn seeds_flag_replaces_the_configured_list() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", SMALL);
    let out = dir.path().join("out");
    let o = run(&cfg, &out, &["--seeds", "3,5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("seed-3").is_dir() && out.join("seed-5").is_dir());
    assert!(!out.join("seed-0").exists());
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().nth(1).unwrap().split(',').nth(3), Some("2"));
}

#[test]
fn single_alpha_sweep_matches_a_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &SMALL.replace("[train]\n", "[train]\nalpha = 50\n"));
    let sweep = dir.path().join("sweep");
    let o = aer(
        &["sweep-alpha", "--config", cfg.to_str().unwrap(), "--alphas", "50", "--out", sweep.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let plain = dir.path().join("plain");
    assert!(run(&cfg, &plain, &[]).status.success());
    assert_eq!(
        std::fs::read(sweep.join("alpha-50/summary.csv")).unwrap(),
        std::fs::read(plain.join("summary.csv")).unwrap()
    );
    let table = std::fs::read_to_string(sweep.join("alpha_sweep.csv")).unwrap();
    assert!(table.starts_with("alpha,method,seeds,faa_mean,faa_se,faa_median"));
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn ablate_writes_every_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &(SMALL.to_string() + "\n[consolidation]\nepochs = 2\n"),
    );
    let out = dir.path().join("ablation");
    let o = aer(&["ablate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        rows,
        [
            "ER",
            "ER+ACE",
            "ER+ACE+alpha",
            "ER+ACE+alpha+AER",
            "ER+ACE+alpha+ABS",
            "full",
            "full-ACE",
            "full+consolidation"
        ]
    );
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().count(), 9);
}
