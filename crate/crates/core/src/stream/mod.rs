//! Seeded class-incremental streams with injected label noise.

mod csv_io;
mod noise;
mod tasks;

pub use csv_io::{load_csv, write_csv, Standardizer};
pub use noise::{inject_noise, ClassCorruption, NoiseKind, NoiseManifest, NoiseSpec, NoisyDataset};
pub use tasks::{split_tasks, task_classes, Batch, EpochBatches, TaskData, TaskStream};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Clean labelled examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Indices of the examples whose label is one of `classes`.
    pub fn indices_of(&self, classes: &[usize]) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect()
    }
}

/// Pairwise distance between class means, as a multiple of the cluster
/// spread, for the simplex arrangement.
pub const MEAN_SEPARATION: f64 = 6.0;
/// Minimum admissible pairwise mean distance, as a multiple of the spread.
pub const MIN_SEPARATION: f64 = 4.0;

/// Class means for `make_synthetic`.
///
/// With `classes <= dims` the means are the vertices of a randomly rotated
/// regular simplex with edge `MEAN_SEPARATION · spread`. Otherwise they are
/// random points on a sphere of the same radius, and the best of a fixed
/// number of draws must keep every pair at least `MIN_SEPARATION · spread`
/// apart.
fn class_means(classes: usize, dims: usize, spread: f64, rng: &mut impl Rng) -> Result<Matrix> {
    let unit = if spread > 0.0 { spread } else { 1.0 };
    let edge = MEAN_SEPARATION * unit;
    let radius = edge / 2f64.sqrt();
    let gauss = |rng: &mut dyn rand::RngCore| -> f64 { StandardNormal.sample(rng) };

    if classes <= dims {
        // Gram-Schmidt on Gaussian vectors gives a random orthonormal frame.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while basis.len() < classes {
            let mut v: Vec<f64> = (0..dims).map(|_| gauss(rng)).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let data = basis.into_iter().flatten().map(|x| x * radius).collect();
        return Ok(Matrix::from_vec(classes, dims, data));
    }

    if dims == 0 {
        return Err(Error::Config("synthetic data needs dims >= 1".into()));
    }
    let min_allowed = MIN_SEPARATION * unit;
    let mut best: Option<(f64, Matrix)> = None;
    for _ in 0..512 {
        let mut data = Vec::with_capacity(classes * dims);
        for _ in 0..classes {
            let v: Vec<f64> = (0..dims).map(|_| gauss(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            data.extend(v.into_iter().map(|x| radius * x / norm));
        }
        let m = Matrix::from_vec(classes, dims, data);
        let d = min_pairwise_distance(&m);
        if best.as_ref().is_none_or(|(bd, _)| d > *bd) {
            best = Some((d, m));
        }
    }
    let (d, m) = best.unwrap();
    if d < min_allowed {
        return Err(Error::Config(format!(
            "cannot place {classes} class means in {dims} dims at least {MIN_SEPARATION}x spread apart"
        )));
    }
    Ok(m)
}

pub(crate) fn min_pairwise_distance(m: &Matrix) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in i + 1..m.rows() {
            let d = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Gaussian clusters, `per_class` examples per class, ordered by class.
pub fn make_synthetic(
    classes: usize,
    dims: usize,
    per_class: usize,
    cluster_spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 1 {
        return Err(Error::Config(format!(
            "synthetic data needs classes >= 2 and per_class >= 1 (got {classes}, {per_class})"
        )));
    }
    if dims == 0 || !(cluster_spread >= 0.0 && cluster_spread.is_finite()) {
        return Err(Error::Config(format!(
            "invalid dims {dims} / cluster spread {cluster_spread}"
        )));
    }
    let mut rng = seed::rng(seed, &[seed::TAG_DATA]);
    let means = class_means(classes, dims, cluster_spread, &mut rng)?;
    let mut data = Vec::with_capacity(classes * per_class * dims);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        for _ in 0..per_class {
            for &mu in means.row(c) {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(mu + cluster_spread * z);
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Matrix::from_vec(classes * per_class, dims, data),
        labels,
        classes,
    )
}

/// Holds out `test_fraction` of every class (rounded down, at least one
/// example left for training) as a clean test split.
pub fn train_test_split(
    data: &Dataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut rng = seed::rng(seed, &[seed::TAG_SPLIT]);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..data.classes {
        let mut idx = data.indices_of(&[c]);
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64) * test_fraction).floor() as usize;
        let n_test = n_test.min(idx.len().saturating_sub(1));
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}
