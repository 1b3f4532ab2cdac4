use super::Matrix;
use crate::error::{Error, Result};

/// Subset of output classes a softmax is restricted to.
///
/// Logits outside the mask are treated as `-inf`: they take no probability
/// mass and receive exactly zero gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    allowed: Vec<bool>,
}

impl ClassMask {
    pub fn all(classes: usize) -> Self {
        Self {
            allowed: vec![true; classes],
        }
    }

    pub fn from_classes(classes: usize, ids: impl IntoIterator<Item = usize>) -> Self {
        let mut allowed = vec![false; classes];
        for c in ids {
            allowed[c] = true;
        }
        Self { allowed }
    }

    pub fn contains(&self, class: usize) -> bool {
        self.allowed.get(class).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.allowed.len()
    }
}

/// Per-sample losses together with the gradient of their weighted mean
/// with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub losses: Vec<f64>,
    pub grad: Matrix,
}

impl LossOutput {
    pub fn mean(&self) -> f64 {
        if self.losses.is_empty() {
            0.0
        } else {
            self.losses.iter().sum::<f64>() / self.losses.len() as f64
        }
    }
}

fn check_mask(logits: &Matrix, mask: Option<&ClassMask>) -> Result<()> {
    match mask {
        Some(m) if m.width() != logits.cols() => Err(Error::Input(format!(
            "class mask width {} does not match {} logits",
            m.width(),
            logits.cols()
        ))),
        Some(m) if m.is_empty() => Err(Error::Input("empty class mask".into())),
        _ => Ok(()),
    }
}

fn allowed(mask: Option<&ClassMask>, c: usize) -> bool {
    mask.is_none_or(|m| m.contains(c))
}

/// Numerically stable softmax over the masked classes; masked-out entries are 0.
pub fn softmax_masked(row: &[f64], mask: Option<&ClassMask>) -> Vec<f64> {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| allowed(mask, c))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row
        .iter()
        .enumerate()
        .map(|(c, &v)| if allowed(mask, c) { (v - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

fn log_sum_exp(row: &[f64], mask: Option<&ClassMask>) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| allowed(mask, c))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|&(c, _)| allowed(mask, c))
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + s.ln()
}

fn check_labels(logits: &Matrix, labels: &[usize], mask: Option<&ClassMask>) -> Result<()> {
    if labels.len() != logits.rows() {
        return Err(Error::Input(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    check_mask(logits, mask)?;
    for (i, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Input(format!(
                "label {y} at row {i} exceeds class count {}",
                logits.cols()
            )));
        }
        if !allowed(mask, y) {
            return Err(Error::Input(format!(
                "label {y} at row {i} lies outside the class mask"
            )));
        }
    }
    Ok(())
}

/// Cross-entropy of each row against its hard label.
pub fn per_sample_ce(
    logits: &Matrix,
    labels: &[usize],
    mask: Option<&ClassMask>,
) -> Result<Vec<f64>> {
    check_labels(logits, labels, mask)?;
    Ok(logits
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| (log_sum_exp(row, mask) - row[y]).max(0.0))
        .collect())
}

/// Hard-label cross-entropy; `grad` is the gradient of `weight · mean(losses)`.
pub fn cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    mask: Option<&ClassMask>,
    weight: f64,
) -> Result<LossOutput> {
    let losses = per_sample_ce(logits, labels, mask)?;
    let n = logits.rows().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (row, &y)) in logits.iter_rows().zip(labels).enumerate() {
        let p = softmax_masked(row, mask);
        let g = grad.row_mut(i);
        for c in 0..p.len() {
            let t = if c == y { 1.0 } else { 0.0 };
            g[c] = if allowed(mask, c) {
                weight * (p[c] - t) / n
            } else {
                0.0
            };
        }
    }
    Ok(LossOutput { losses, grad })
}

fn check_targets(logits: &Matrix, targets: &Matrix, mask: Option<&ClassMask>) -> Result<()> {
    if targets.rows() != logits.rows() || targets.cols() != logits.cols() {
        return Err(Error::Input(format!(
            "targets {}x{} do not match logits {}x{}",
            targets.rows(),
            targets.cols(),
            logits.rows(),
            logits.cols()
        )));
    }
    check_mask(logits, mask)?;
    for (i, row) in targets.iter_rows().enumerate() {
        for (c, &q) in row.iter().enumerate() {
            if q != 0.0 && !allowed(mask, c) {
                return Err(Error::Input(format!(
                    "target mass on masked class {c} at row {i}"
                )));
            }
        }
    }
    Ok(())
}

/// Cross-entropy against probability-vector targets.
pub fn soft_cross_entropy(
    logits: &Matrix,
    targets: &Matrix,
    mask: Option<&ClassMask>,
    weight: f64,
) -> Result<LossOutput> {
    check_targets(logits, targets, mask)?;
    let n = logits.rows().max(1) as f64;
    let mut losses = Vec::with_capacity(logits.rows());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (row, q)) in logits.iter_rows().zip(targets.iter_rows()).enumerate() {
        let lse = log_sum_exp(row, mask);
        let p = softmax_masked(row, mask);
        let mass: f64 = q.iter().sum();
        let mut loss = 0.0;
        let g = grad.row_mut(i);
        for c in 0..p.len() {
            if !allowed(mask, c) {
                continue;
            }
            loss += q[c] * (lse - row[c]);
            g[c] = weight * (mass * p[c] - q[c]) / n;
        }
        losses.push(loss.max(0.0));
    }
    Ok(LossOutput { losses, grad })
}

/// Mean squared error between softmax outputs and targets, averaged over the
/// masked classes.
pub fn consistency_mse(
    logits: &Matrix,
    targets: &Matrix,
    mask: Option<&ClassMask>,
    weight: f64,
) -> Result<LossOutput> {
    check_targets(logits, targets, mask)?;
    let n = logits.rows().max(1) as f64;
    let k = mask.map_or(logits.cols(), ClassMask::len) as f64;
    let mut losses = Vec::with_capacity(logits.rows());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, (row, q)) in logits.iter_rows().zip(targets.iter_rows()).enumerate() {
        let p = softmax_masked(row, mask);
        let diff: Vec<f64> = p.iter().zip(q).map(|(a, b)| a - b).collect();
        let loss = (0..p.len())
            .filter(|&c| allowed(mask, c))
            .map(|c| diff[c] * diff[c])
            .sum::<f64>()
            / k;
        let coupled: f64 = (0..p.len())
            .filter(|&c| allowed(mask, c))
            .map(|c| diff[c] * p[c])
            .sum();
        let g = grad.row_mut(i);
        for c in 0..p.len() {
            if allowed(mask, c) {
                g[c] = weight * (2.0 / k) * p[c] * (diff[c] - coupled) / n;
            }
        }
        losses.push(loss);
    }
    Ok(LossOutput { losses, grad })
}

/// Temperature sharpening `q^(1/τ) / Σ q^(1/τ)`.
pub fn sharpen(probs: &[f64], temperature: f64) -> Vec<f64> {
    let inv = 1.0 / temperature;
    let powered: Vec<f64> = probs.iter().map(|&q| q.powf(inv)).collect();
    let z: f64 = powered.iter().sum();
    if z > 0.0 && z.is_finite() {
        powered.into_iter().map(|q| q / z).collect()
    } else {
        // τ small enough to underflow every entry: fall back to hard max
        let best = probs
            .iter()
            .enumerate()
            .fold(0, |b, (i, &q)| if q > probs[b] { i } else { b });
        (0..probs.len()).map(|i| f64::from(i == best)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn uniform_logits_give_log_class_count() {
        let logits = Matrix::zeros(3, 5);
        let losses = per_sample_ce(&logits, &[0, 2, 4], None).unwrap();
        for l in losses {
            assert!(close(l, 5f64.ln(), 1e-12));
        }
    }

    #[test]
    fn masked_uniform_logits_give_ln2() {
        let logits = Matrix::zeros(2, 6);
        let mask = ClassMask::from_classes(6, [2, 3]);
        let losses = per_sample_ce(&logits, &[2, 3], Some(&mask)).unwrap();
        for l in losses {
            assert!(close(l, 2f64.ln(), 1e-12));
        }
    }

    #[test]
    fn loss_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let logits = Matrix::from_rows(&[[margin, 0.0, 0.0]]);
            let l = per_sample_ce(&logits, &[0], None).unwrap()[0];
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn label_outside_mask_is_rejected() {
        let logits = Matrix::zeros(1, 4);
        let mask = ClassMask::from_classes(4, [0, 1]);
        assert!(matches!(
            per_sample_ce(&logits, &[3], Some(&mask)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn masked_classes_get_exactly_zero_gradient() {
        let logits = Matrix::from_rows(&[[0.3, -1.2, 2.0, 0.7], [1.0, 1.0, -3.0, 0.1]]);
        let mask = ClassMask::from_classes(4, [1, 3]);
        let out = cross_entropy(&logits, &[1, 3], Some(&mask), 1.0).unwrap();
        for i in 0..2 {
            assert_eq!(out.grad.get(i, 0), 0.0);
            assert_eq!(out.grad.get(i, 2), 0.0);
        }
        let targets = Matrix::from_rows(&[[0.0, 0.4, 0.0, 0.6], [0.0, 1.0, 0.0, 0.0]]);
        for out in [
            soft_cross_entropy(&logits, &targets, Some(&mask), 1.0).unwrap(),
            consistency_mse(&logits, &targets, Some(&mask), 1.0).unwrap(),
        ] {
            for i in 0..2 {
                assert_eq!(out.grad.get(i, 0), 0.0);
                assert_eq!(out.grad.get(i, 2), 0.0);
            }
        }
    }

    fn fd_check(f: impl Fn(&Matrix) -> (f64, Matrix), logits: &Matrix) {
        let (_, grad) = f(logits);
        let h = 1e-5;
        for i in 0..logits.rows() {
            for c in 0..logits.cols() {
                let mut plus = logits.clone();
                plus.set(i, c, logits.get(i, c) + h);
                let mut minus = logits.clone();
                minus.set(i, c, logits.get(i, c) - h);
                let numeric = (f(&plus).0 - f(&minus).0) / (2.0 * h);
                let analytic = grad.get(i, c);
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    (numeric - analytic).abs() / denom < 1e-4 || (numeric - analytic).abs() < 1e-9,
                    "({i},{c}) numeric {numeric} analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let logits = Matrix::from_rows(&[[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -3.0, 0.1]]);
        let mask = ClassMask::from_classes(4, [0, 1, 3]);
        let targets = Matrix::from_rows(&[[0.2, 0.3, 0.0, 0.5], [0.0, 0.9, 0.0, 0.1]]);
        fd_check(
            |z| {
                let o = cross_entropy(z, &[0, 3], Some(&mask), 0.7).unwrap();
                (0.7 * o.mean(), o.grad)
            },
            &logits,
        );
        fd_check(
            |z| {
                let o = soft_cross_entropy(z, &targets, Some(&mask), 1.3).unwrap();
                (1.3 * o.mean(), o.grad)
            },
            &logits,
        );
        fd_check(
            |z| {
                let o = consistency_mse(z, &targets, Some(&mask), 2.0).unwrap();
                (2.0 * o.mean(), o.grad)
            },
            &logits,
        );
    }

    #[test]
    fn sharpen_limits() {
        let p = [0.1, 0.6, 0.3];
        let same = sharpen(&p, 1.0);
        for (a, b) in same.iter().zip(p) {
            assert!(close(*a, b, 1e-15));
        }
        let hard = sharpen(&p, 1e-3);
        assert_eq!(hard, vec![0.0, 1.0, 0.0]);
        let half = sharpen(&p, 0.5);
        assert!(half[1] > 0.6 && close(half.iter().sum::<f64>(), 1.0, 1e-12));
    }
}
