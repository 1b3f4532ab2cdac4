//! Drives configured experiments over seeds and writes their artifacts.
//!
//! Layout of an output directory:
//!
//! ```text
//! manifest.json
//! summary.csv
//! seed-<s>/accuracy.json
//! seed-<s>/trace.csv, trace.jsonl
//! seed-<s>/noise.json
//! seed-<s>/buffer-task<t>.jsonl
//! seed-<s>/consolidation.json
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{unix_now, ExperimentConfig, ExperimentManifest};
use crate::consolidation::ConsolidationMode;
use crate::engine::{train_reference, Benchmark, Learner, Method, RunOutcome};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate_seeds, median, write_alpha_csv, write_summary_csv, write_trace_csv,
    write_trace_jsonl, RunRecord, SummaryRow,
};
use crate::stream::{Dataset, NoiseManifest};

/// One seed of one configuration.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub record: RunRecord,
    pub outcome: RunOutcome,
    pub noise: NoiseManifest,
}

/// All seeds of one configuration plus their aggregate.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub summary: SummaryRow,
    pub runs: Vec<SeedRun>,
}

impl Experiment {
    pub fn faas(&self) -> Vec<f64> {
        self.runs
            .iter()
            .map(|r| r.record.faa().expect("complete matrix"))
            .collect()
    }

    pub fn median_faa(&self) -> f64 {
        median(&self.faas()).expect("at least one seed")
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs one seed in memory. With `dir`, per-seed artifacts are written there
/// and a numerical abort leaves a state dump under `dir/state-dump`.
pub fn run_seed(cfg: &ExperimentConfig, data: &Dataset, seed: u64, dir: Option<&Path>) -> Result<SeedRun> {
    let noise = cfg.noise_spec(data.classes, seed);
    let (bench, noise_manifest) = Benchmark::build(
        data,
        &noise,
        cfg.data.tasks,
        cfg.train.batch_size,
        cfg.data.test_fraction,
        seed,
    )?;
    let reference = if cfg.run.diversity {
        Some(train_reference(&bench, &cfg.train, seed)?)
    } else {
        None
    };
    let mut learner = Learner::new(&cfg.train, &cfg.consolidation, data.dims(), data.classes, seed)?;
    let outcome = match learner.run(&bench, reference.as_ref()) {
        Ok(o) => o,
        Err(e @ (Error::Numerical(_) | Error::Invariant(_))) => {
            if let Some(dir) = dir {
                let dump = learner.dump_state(dir.join("state-dump"))?;
                return Err(match e {
                    Error::Numerical(msg) => Error::Numerical(format!("{msg}; state dumped to {}", dump.display())),
                    Error::Invariant(msg) => Error::Invariant(format!("{msg}; state dumped to {}", dump.display())),
                    other => other,
                });
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let record = RunRecord {
        method: cfg.train.method.id().to_string(),
        noise_kind: cfg.noise.kind,
        noise_rate: cfg.noise.rate,
        seed,
        config_key: cfg.key(),
        accuracy: outcome.accuracy.clone(),
        purity: outcome.purity,
        diversity: outcome.diversity,
        trace: outcome.trace.clone(),
    };
    let run = SeedRun {
        record,
        outcome,
        noise: noise_manifest,
    };
    if let Some(dir) = dir {
        write_seed(dir, &run)?;
    }
    Ok(run)
}

fn write_seed(dir: &Path, run: &SeedRun) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let mut written = Vec::new();
    let mut out = |name: String| {
        let p = dir.join(name);
        written.push(p.clone());
        p
    };
    write_json(&out("accuracy.json".into()), &run.record.accuracy)?;
    write_json(&out("noise.json".into()), &run.noise)?;
    write_trace_csv(&run.record.trace, out("trace.csv".into()))?;
    write_trace_jsonl(&run.record.trace, out("trace.jsonl".into()))?;
    write_json(&out("consolidation.json".into()), &run.outcome.reports)?;
    for (t, b) in run.outcome.buffers.iter().enumerate() {
        b.dump_jsonl(out(format!("buffer-task{t}.jsonl")))?;
    }
    Ok(written)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Every configured seed, artifacts under `out` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Experiment> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let mut runs = Vec::with_capacity(cfg.run.seeds.len());
    for &seed in &cfg.run.seeds {
        log::info!("{} seed {seed}", cfg.train.method);
        let dir = out.map(|o| seed_dir(o, seed));
        runs.push(run_seed(cfg, &data, seed, dir.as_deref())?);
    }
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    Ok(Experiment {
        summary: aggregate_seeds(&records)?,
        runs,
    })
}

fn relative(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn collect_outputs(out: &Path) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut stack = vec![out.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                files.push(relative(out, &path));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn finish_manifest(mut manifest: ExperimentManifest, out: &Path) -> Result<()> {
    manifest.outputs = collect_outputs(out)?;
    manifest.finished_unix = unix_now();
    manifest.write(out.join("manifest.json"))
}

/// `run`: all seeds, summary CSV with one aggregate row, manifest.
pub fn run_command(cfg: &ExperimentConfig, out: &Path) -> Result<Experiment> {
    create_dir(out)?;
    let manifest = ExperimentManifest::new("run", cfg, unix_now());
    let exp = run_experiment(cfg, Some(out))?;
    write_summary_csv(std::slice::from_ref(&exp.summary), out.join("summary.csv"))?;
    finish_manifest(manifest, out)?;
    Ok(exp)
}

/// `sweep-alpha`: one full run per α under `out/alpha-<α>/` and an FAA
/// table in `out/alpha_sweep.csv`.
pub fn sweep_alpha(cfg: &ExperimentConfig, alphas: &[f64], out: &Path) -> Result<Vec<(f64, Experiment)>> {
    if alphas.is_empty() {
        return Err(Error::Config("--alphas: at least one value is required".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=100.0).contains(*a)) {
        return Err(Error::Config(format!("--alphas: {a} outside [0, 100]")));
    }
    create_dir(out)?;
    let manifest = ExperimentManifest::new("sweep-alpha", cfg, unix_now());
    let mut results = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let mut c = cfg.clone();
        c.train.alpha = alpha;
        let dir = out.join(format!("alpha-{alpha}"));
        results.push((alpha, run_command(&c, &dir)?));
    }
    let rows: Vec<(f64, SummaryRow, f64)> = results
        .iter()
        .map(|(a, e)| (*a, e.summary.clone(), e.median_faa()))
        .collect();
    write_alpha_csv(&rows, out.join("alpha_sweep.csv"))?;
    finish_manifest(manifest, out)?;
    Ok(results)
}

/// Ablation rows: label, method, consolidation.
pub const ABLATION_ROWS: [(&str, Method, bool); 8] = [
    ("ER", Method::Er, false),
    ("ER+ACE", Method::ErAce, false),
    ("ER+ACE+alpha", Method::ErAceAlpha, false),
    ("ER+ACE+alpha+AER", Method::AerReservoir, false),
    ("ER+ACE+alpha+ABS", Method::ErAceAbs, false),
    ("full", Method::AerAbs, false),
    ("full-ACE", Method::AerAbsNoAce, false),
    ("full+consolidation", Method::AerAbs, true),
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub experiment: Experiment,
}

fn ablation_config(cfg: &ExperimentConfig, method: Method, consolidate: bool) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.train.method = method;
    c.consolidation.mode = match (consolidate, cfg.consolidation.mode) {
        (false, _) => ConsolidationMode::None,
        (true, ConsolidationMode::None) => ConsolidationMode::Mixmatch,
        (true, m) => m,
    };
    c
}

fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(["row", "method", "consolidation", "seeds", "faa_mean", "faa_se", "faa_median"])
        .map_err(err)?;
    for r in rows {
        let s = &r.experiment.summary;
        w.write_record([
            r.label.to_string(),
            s.method.clone(),
            (r.label == "full+consolidation").to_string(),
            s.seeds.to_string(),
            format!("{:.6}", s.faa.mean),
            format!("{:.6}", s.faa.se),
            format!("{:.6}", r.experiment.median_faa()),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `ablate`: every ablation row under one noise setting, results under
/// `out/<row>/`, comparison table in `out/ablation.csv` and all aggregates
/// in `out/summary.csv`.
pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    create_dir(out)?;
    let manifest = ExperimentManifest::new("ablate", cfg, unix_now());
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (label, method, consolidate) in ABLATION_ROWS {
        let c = ablation_config(cfg, method, consolidate);
        let experiment = run_command(&c, &out.join(label))?;
        rows.push(AblationRow { label, experiment });
    }
    write_ablation_csv(&rows, &out.join("ablation.csv"))?;
    let summaries: Vec<SummaryRow> = rows.iter().map(|r| r.experiment.summary.clone()).collect();
    write_summary_csv(&summaries, out.join("summary.csv"))?;
    finish_manifest(manifest, out)?;
    Ok(rows)
}

/// Runs only the ablation rows needed in memory, without artifacts.
pub fn ablation_in_memory(cfg: &ExperimentConfig, rows: &[(&'static str, Method, bool)]) -> Result<Vec<AblationRow>> {
    rows.iter()
        .map(|&(label, method, consolidate)| {
            Ok(AblationRow {
                label,
                experiment: run_experiment(&ablation_config(cfg, method, consolidate), None)?,
            })
        })
        .collect()
}
