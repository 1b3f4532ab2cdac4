//! CSV datasets: header `f0,...,f{d-1},label`, one example per row.

use std::fs::File;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a dataset; the class count is one past the largest label.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let width = header.len();
    if width < 2 || &header[width - 1] != "label" {
        return Err(parse_err(path, 1, "header must end with a `label` column"));
    }
    for (i, name) in header.iter().take(width - 1).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(
                path,
                1,
                format!("expected column `f{i}`, found `{name}`"),
            ));
        }
    }
    let dims = width - 1;

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(parse_err(
                path,
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        for (i, cell) in record.iter().take(dims).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric value `{cell}` in f{i}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value in f{i}")));
            }
            data.push(v);
        }
        let cell = &record[dims];
        let y: usize = cell
            .parse()
            .map_err(|_| parse_err(path, line, format!("unknown label `{cell}`")))?;
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let classes = labels.iter().max().unwrap() + 1;
    Dataset::new(Matrix::from_vec(labels.len(), dims, data), labels, classes)
}

pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = (0..data.dims()).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    for (row, y) in data.features.iter_rows().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-feature standardisation fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Matrix) -> Self {
        let n = features.rows().max(1) as f64;
        let d = features.cols();
        let mut mean = vec![0.0; d];
        for row in features.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in features.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        // constant columns are centred but not scaled
        let std = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &mut Matrix) {
        for i in 0..features.rows() {
            for ((v, m), s) in features.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}
