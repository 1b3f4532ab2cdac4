//! Accuracy matrices, forgetting, loss-separation traces and multi-seed
//! aggregation, plus the CSV writers for summaries and traces.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::stream::{Dataset, NoiseKind};
use crate::tensor::ModelState;

/// `a[j][t]`: accuracy on task `j` after training task `t`, for `j <= t`.
/// Stored row-wise by training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Builds a matrix from per-task columns: `columns[j]` lists
    /// `a[j][j], a[j][j+1], ...`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let tasks = columns.len();
        let mut m = Self::new(tasks);
        for t in 0..tasks {
            let row = (0..=t)
                .map(|j| {
                    columns[j].get(t - j).copied().ok_or_else(|| {
                        Error::Input(format!("task {j} lacks an accuracy after task {t}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            m.push_row(row)?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Appends the accuracies after the next task (one per task seen).
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.tasks {
            return Err(Error::Input(format!("matrix already has {} rows", self.tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::Input(format!(
                "row after task {t} needs {} entries, got {}",
                t + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Input(format!("accuracy outside [0, 1] in row {t}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, j: usize, t: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    pub fn final_row(&self) -> Result<&[f64]> {
        if !self.is_complete() || self.tasks == 0 {
            return Err(Error::Input(format!(
                "accuracy matrix incomplete: {} of {} rows",
                self.rows.len(),
                self.tasks
            )));
        }
        Ok(&self.rows[self.tasks - 1])
    }
}

/// Final average accuracy: mean of the last row.
pub fn faa(m: &AccuracyMatrix) -> Result<f64> {
    let row = m.final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Mean over `j < T−1` of the drop from the best earlier accuracy on task
/// `j` to its final accuracy.
pub fn final_forgetting(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.final_row()?;
    let t_max = m.tasks();
    if t_max < 2 {
        return Err(Error::Input("forgetting needs at least two tasks".into()));
    }
    let mut total = 0.0;
    for (j, &fin) in last.iter().enumerate().take(t_max - 1) {
        let best = (j..t_max - 1)
            .filter_map(|t| m.get(j, t))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best - fin;
    }
    Ok(total / (t_max - 1) as f64)
}

/// Accuracy against clean labels, predicting over the model's seen classes.
pub fn accuracy(model: &ModelState, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Input("empty test split".into()));
    }
    let pred = model.predict(&test.features)?;
    let hits = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Mean buffer loss of entries whose stored label is correct / corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Separation {
    pub clean: Option<f64>,
    pub noisy: Option<f64>,
}

impl Separation {
    pub fn gap(&self) -> Option<f64> {
        Some(self.noisy? - self.clean?)
    }
}

pub fn separation_trace(buffer: &MemoryBuffer, model: &ModelState) -> Result<Separation> {
    if buffer.is_empty() {
        return Ok(Separation::default());
    }
    let losses = buffer.losses_under(model)?;
    let mut sums = [(0.0, 0usize); 2];
    for (e, l) in buffer.entries().iter().zip(losses) {
        let k = usize::from(e.label != e.truth);
        sums[k].0 += l;
        sums[k].1 += 1;
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    Ok(Separation {
        clean: mean(sums[0]),
        noisy: mean(sums[1]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochMode {
    Learning,
    Forgetting,
}

impl EpochMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpochMode::Learning => "learning",
            EpochMode::Forgetting => "forgetting",
        }
    }
}

/// One line of the per-epoch run trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub task: usize,
    pub epoch: usize,
    /// Epoch counter over the whole run.
    pub global_epoch: usize,
    pub mode: EpochMode,
    pub inserting: bool,
    pub stream_loss: Option<f64>,
    pub clean_loss: Option<f64>,
    pub noisy_loss: Option<f64>,
    pub purity: f64,
    pub buffer_len: usize,
    /// Parameters after the restore equal those at the epoch start.
    pub params_restored: Option<bool>,
    /// Buffer digest unchanged across a frozen epoch.
    pub buffer_frozen: Option<bool>,
    /// Accuracies on tasks `0..=task`, present on the last epoch of a task.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_row: Option<Vec<f64>>,
}

/// Everything a single seed of a single method produces for aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub seed: u64,
    /// Digest of the configuration with the seed list removed.
    pub config_key: String,
    pub accuracy: AccuracyMatrix,
    pub purity: f64,
    pub diversity: Option<f64>,
    pub trace: Vec<EpochTrace>,
}

impl RunRecord {
    pub fn faa(&self) -> Result<f64> {
        faa(&self.accuracy)
    }

    pub fn final_forgetting(&self) -> Result<f64> {
        final_forgetting(&self.accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_se(values: &[f64]) -> Result<MeanSe> {
    if values.is_empty() {
        return Err(Error::Input("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok(MeanSe { mean, se: 0.0 });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MeanSe {
        mean,
        se: (var / n).sqrt(),
    })
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub noise_kind: NoiseKind,
    pub noise_rate: f64,
    pub seeds: usize,
    pub faa: MeanSe,
    pub ff: Option<MeanSe>,
    pub purity: MeanSe,
    pub diversity: Option<MeanSe>,
}

pub fn aggregate_seeds(records: &[RunRecord]) -> Result<SummaryRow> {
    let first = records
        .first()
        .ok_or_else(|| Error::Input("no run records to aggregate".into()))?;
    if let Some(r) = records.iter().find(|r| {
        r.config_key != first.config_key
            || r.method != first.method
            || r.noise_kind != first.noise_kind
            || r.noise_rate != first.noise_rate
    }) {
        return Err(Error::Input(format!(
            "record for seed {} was produced by a different configuration",
            r.seed
        )));
    }
    let faas = records.iter().map(RunRecord::faa).collect::<Result<Vec<_>>>()?;
    let ff = if first.accuracy.tasks() >= 2 {
        let v = records
            .iter()
            .map(RunRecord::final_forgetting)
            .collect::<Result<Vec<_>>>()?;
        Some(mean_se(&v)?)
    } else {
        None
    };
    let purities: Vec<f64> = records.iter().map(|r| r.purity).collect();
    let diversity = records
        .iter()
        .map(|r| r.diversity)
        .collect::<Option<Vec<f64>>>()
        .map(|v| mean_se(&v))
        .transpose()?;
    Ok(SummaryRow {
        method: first.method.clone(),
        noise_kind: first.noise_kind,
        noise_rate: first.noise_rate,
        seeds: records.len(),
        faa: mean_se(&faas)?,
        ff,
        purity: mean_se(&purities)?,
        diversity,
    })
}

pub const SUMMARY_COLUMNS: [&str; 12] = [
    "method",
    "noise_kind",
    "noise_rate",
    "seeds",
    "faa_mean",
    "faa_se",
    "ff_mean",
    "ff_se",
    "purity_mean",
    "purity_se",
    "diversity_mean",
    "diversity_se",
];

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn kind_str(k: NoiseKind) -> &'static str {
    match k {
        NoiseKind::Symmetric => "symmetric",
        NoiseKind::Asymmetric => "asymmetric",
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e))
}

/// Summary table, one row per method/noise aggregate. Numbers use six
/// decimals; absent metrics are empty fields.
pub fn write_summary_csv(rows: &[SummaryRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(SUMMARY_COLUMNS).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            kind_str(r.noise_kind).to_string(),
            fmt(r.noise_rate),
            r.seeds.to_string(),
            fmt(r.faa.mean),
            fmt(r.faa.se),
            fmt_opt(r.ff.map(|m| m.mean)),
            fmt_opt(r.ff.map(|m| m.se)),
            fmt(r.purity.mean),
            fmt(r.purity.se),
            fmt_opt(r.diversity.map(|m| m.mean)),
            fmt_opt(r.diversity.map(|m| m.se)),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "task",
    "epoch",
    "global_epoch",
    "mode",
    "inserting",
    "stream_loss",
    "clean_loss",
    "noisy_loss",
    "purity",
    "buffer_len",
];

pub fn write_trace_csv(trace: &[EpochTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(TRACE_COLUMNS).map_err(csv_err(path))?;
    for e in trace {
        w.write_record([
            e.task.to_string(),
            e.epoch.to_string(),
            e.global_epoch.to_string(),
            e.mode.as_str().to_string(),
            e.inserting.to_string(),
            fmt_opt(e.stream_loss),
            fmt_opt(e.clean_loss),
            fmt_opt(e.noisy_loss),
            fmt(e.purity),
            e.buffer_len.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_trace_jsonl(trace: &[EpochTrace], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in trace {
        out.push_str(&serde_json::to_string(e).expect("trace serializes"));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// FAA table across α values: `(alpha, aggregate, median FAA)` per row.
pub fn write_alpha_csv(rows: &[(f64, SummaryRow, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["alpha", "method", "seeds", "faa_mean", "faa_se", "faa_median"])
        .map_err(csv_err(path))?;
    for (alpha, r, med) in rows {
        w.write_record([
            fmt(*alpha),
            r.method.clone(),
            r.seeds.to_string(),
            fmt(r.faa.mean),
            fmt(r.faa.se),
            fmt(*med),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
