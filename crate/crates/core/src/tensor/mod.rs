//! Dense matrices and a small multi-layer perceptron trained with SGD.
//!
//! Everything is `f64` so finite-difference checks and checkpoint
//! round-trips can be compared exactly.

mod checkpoint;
mod loss;
mod model;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use loss::{
    consistency_mse, cross_entropy, per_sample_ce, sharpen, soft_cross_entropy, softmax_masked,
    ClassMask, LossOutput,
};
pub use model::{Activations, Dense, Gradients, MlpConfig, ModelState};

use rand_distr::{Distribution, Normal};

use crate::seed;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(idx.len(), self.cols, data)
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for n in 0..self.rows {
            let b_row = rhs.row(n);
            for (i, &a) in self.row(n).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t shape mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = a.iter().zip(rhs.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Adds seeded Gaussian jitter with standard deviation `strength` to every
/// coordinate. A strength of zero returns the input unchanged.
pub fn augment(features: &Matrix, seed: u64, strength: f64) -> Matrix {
    let mut out = features.clone();
    if strength <= 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, strength).expect("strength is finite and positive");
    let mut rng = seed::rng(seed, &[]);
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[1.0, 0.5], [0.0, -1.0], [2.0, 1.0]]);
        let ab = a.matmul(&b);
        assert_eq!(ab.as_slice(), &[7.0, 1.5, 16.0, 3.0]);

        let bt = Matrix::from_rows(&[[1.0, 0.0, 2.0], [0.5, -1.0, 1.0]]);
        assert_eq!(a.matmul_t(&bt), ab);

        let at = Matrix::from_rows(&[[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]]);
        assert_eq!(at.t_matmul(&b), ab);
    }

    #[test]
    fn augment_zero_strength_is_identity() {
        let x = Matrix::from_rows(&[[1.0, -2.0], [0.25, 3.0]]);
        assert_eq!(augment(&x, 11, 0.0), x);
    }

    #[test]
    fn augment_is_seeded() {
        let x = Matrix::zeros(4, 3);
        assert_eq!(augment(&x, 5, 0.3), augment(&x, 5, 0.3));
        assert_ne!(augment(&x, 5, 0.3), augment(&x, 6, 0.3));
    }

    #[test]
    fn augment_jitter_has_requested_std() {
        // 10^5 draws; the sample std of N(0, s) lies within 5% of s with
        // overwhelming probability (relative se ~ 1/sqrt(2n) ~ 0.2%).
        let s = 0.7;
        let x = Matrix::zeros(1000, 100);
        let out = augment(&x, 42, s);
        let n = out.as_slice().len() as f64;
        let mean = out.as_slice().iter().sum::<f64>() / n;
        let var = out.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - s).abs() < 0.05 * s, "std {}", var.sqrt());
    }
}
