//! End-of-task consolidation on the memory buffer: plain supervised fitting,
//! or a two-component GMM split of the buffer losses followed by
//! MixMatch-style semi-supervised training.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::buffer::MemoryBuffer;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{
    augment, consistency_mse, cross_entropy, sharpen, soft_cross_entropy, softmax_masked,
    ClassMask, Matrix, ModelState,
};

/// Variance floor for degenerate mixture components.
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsolidationMode {
    None,
    BufferFit,
    Mixmatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsolidationConfig {
    pub mode: ConsolidationMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; the run's learning rate when absent.
    pub lr: Option<f64>,
    pub lambda_u: f64,
    pub temperature: f64,
    pub mixup_alpha: f64,
    pub augmentations: usize,
    pub threshold: f64,
    pub augment_strength: f64,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self {
            mode: ConsolidationMode::None,
            epochs: 255,
            batch_size: 64,
            lr: None,
            lambda_u: 0.01,
            temperature: 0.5,
            mixup_alpha: 0.75,
            augmentations: 3,
            threshold: 0.5,
            augment_strength: 0.1,
            gmm_max_iter: 100,
            gmm_tol: 1e-8,
        }
    }
}

impl ConsolidationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("consolidation.{field}: {why}")));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.augmentations == 0 {
            return bad("augmentations", "must be >= 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be > 0");
        }
        if !(self.mixup_alpha > 0.0) {
            return bad("mixup_alpha", "must be > 0");
        }
        if !(self.lambda_u >= 0.0) {
            return bad("lambda_u", "must be >= 0");
        }
        if !(self.augment_strength >= 0.0) {
            return bad("augment_strength", "must be >= 0");
        }
        if let Some(lr) = self.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("lr", "must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Two-component 1-D Gaussian mixture, components ordered by mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    /// Posterior of the low-mean component for each input.
    pub posteriors: Vec<f64>,
    /// Log-likelihood after each iteration.
    pub log_likelihood: Vec<f64>,
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean).powi(2) / var)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

struct Params {
    means: [f64; 2],
    vars: [f64; 2],
    weights: [f64; 2],
}

impl Params {
    fn joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].ln() + log_normal(x, self.means[k], self.vars[k]))
    }

    fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.joint(x);
                log_add(a, b)
            })
            .sum()
    }

    fn responsibilities(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.joint(x);
                (a - log_add(a, b)).exp()
            })
            .collect()
    }
}

fn floored(var: f64, floored_any: &mut bool) -> f64 {
    if var < VARIANCE_FLOOR {
        *floored_any = true;
        VARIANCE_FLOOR
    } else {
        var
    }
}

/// EM for a two-component mixture on per-sample losses, initialised by
/// splitting at the median. Stops once the log-likelihood gain drops below
/// `tol` or after `max_iter` iterations.
pub fn fit_gmm_em(losses: &[f64], max_iter: usize, tol: f64) -> Result<GmmFit> {
    if losses.len() < 4 {
        return Err(Error::Input(format!(
            "mixture fit needs at least 4 losses, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Input("losses must be finite and non-negative".into()));
    }
    let n = losses.len() as f64;
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]));
    let half = losses.len() / 2;
    let mut floored_any = false;
    let mut init = |idx: &[usize]| {
        let m = idx.iter().map(|&i| losses[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (losses[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        (m, floored(v, &mut floored_any), idx.len() as f64 / n)
    };
    let (m0, v0, w0) = init(&order[..half]);
    let (m1, v1, w1) = init(&order[half..]);
    let mut p = Params {
        means: [m0, m1],
        vars: [v0, v1],
        weights: [w0, w1],
    };

    let mut history = vec![p.log_likelihood(losses)];
    for _ in 0..max_iter {
        let r0 = p.responsibilities(losses);
        let mut next = Params {
            means: [0.0; 2],
            vars: [0.0; 2],
            weights: [0.0; 2],
        };
        for k in 0..2 {
            let resp = |i: usize| if k == 0 { r0[i] } else { 1.0 - r0[i] };
            let nk: f64 = (0..losses.len()).map(resp).sum();
            if nk <= 1e-12 {
                // an emptied component keeps its previous shape
                next.means[k] = p.means[k];
                next.vars[k] = p.vars[k];
                next.weights[k] = 1e-12;
                continue;
            }
            let mean = (0..losses.len()).map(|i| resp(i) * losses[i]).sum::<f64>() / nk;
            let var = (0..losses.len())
                .map(|i| resp(i) * (losses[i] - mean).powi(2))
                .sum::<f64>()
                / nk;
            next.means[k] = mean;
            next.vars[k] = floored(var, &mut floored_any);
            next.weights[k] = nk / n;
        }
        let z = next.weights[0] + next.weights[1];
        next.weights = next.weights.map(|w| w / z);
        p = next;
        let ll = p.log_likelihood(losses);
        let gain = ll - history.last().unwrap();
        history.push(ll);
        if gain.abs() < tol {
            break;
        }
    }
    if floored_any {
        log::warn!("mixture component variance floored at {VARIANCE_FLOOR}");
    }

    let mut resp = p.responsibilities(losses);
    if p.means[1] < p.means[0] {
        p.means.swap(0, 1);
        p.vars.swap(0, 1);
        p.weights.swap(0, 1);
        for r in &mut resp {
            *r = 1.0 - *r;
        }
    }
    Ok(GmmFit {
        means: p.means,
        variances: p.vars,
        weights: p.weights,
        posteriors: resp,
        log_likelihood: history,
    })
}

/// `P = {i : u_i >= threshold}` and its complement.
pub fn split_pure_uncertain(fit: &GmmFit, threshold: f64) -> (Vec<usize>, Vec<usize>) {
    (0..fit.posteriors.len()).partition(|&i| fit.posteriors[i] >= threshold)
}

/// Co-refined targets `u·onehot(ỹ) + (1 − u)·mean_η softmax(f(T(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn corefine_labels(
    model: &ModelState,
    features: &Matrix,
    labels: &[usize],
    confidence: &[f64],
    augmentations: usize,
    strength: f64,
    mask: &ClassMask,
    seed: u64,
) -> Result<Matrix> {
    if augmentations == 0 {
        return Err(Error::Input("at least one augmentation required".into()));
    }
    let c = model.classes();
    let mut avg = Matrix::zeros(features.rows(), c);
    for a in 0..augmentations {
        let logits = model.forward(&augment(features, seed::derive(seed, &[a as u64]), strength))?;
        for (i, row) in logits.iter_rows().enumerate() {
            let p = softmax_masked(row, Some(mask));
            for (dst, v) in avg.row_mut(i).iter_mut().zip(p) {
                *dst += v / augmentations as f64;
            }
        }
    }
    let mut out = Matrix::zeros(features.rows(), c);
    for i in 0..features.rows() {
        let u = confidence[i];
        let row = out.row_mut(i);
        for (k, dst) in row.iter_mut().enumerate() {
            *dst = (1.0 - u) * avg.get(i, k);
        }
        row[labels[i]] += u;
    }
    Ok(out)
}

/// Cosine decay from `peak` at epoch 0 towards 0 at `total`.
pub fn cosine_lr(peak: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return peak;
    }
    0.5 * peak * (1.0 + (PI * epoch as f64 / total as f64).cos())
}

fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, 1.0);
    }
    m
}

fn class_mask(model: &ModelState) -> ClassMask {
    let m = model.seen_mask();
    if m.is_empty() {
        ClassMask::all(model.classes())
    } else {
        m
    }
}

/// Accuracy of `model` on the buffer against the stored labels.
pub fn buffer_accuracy(model: &ModelState, buffer: &MemoryBuffer) -> Result<f64> {
    if buffer.is_empty() {
        return Ok(0.0);
    }
    let pred = model.predict(&buffer.features())?;
    let hits = pred
        .iter()
        .zip(buffer.entries())
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(hits as f64 / buffer.len() as f64)
}

/// Supervised cross-entropy fine-tuning on the buffer with cosine-decayed
/// learning rate. Returns the mean training loss of each epoch.
pub fn buffer_fit(
    model: &mut ModelState,
    buffer: &MemoryBuffer,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if buffer.is_empty() {
        log::warn!("buffer fit skipped: empty buffer");
        return Ok(Vec::new());
    }
    let features = buffer.features();
    let labels: Vec<usize> = buffer.entries().iter().map(|e| e.label).collect();
    let mask = class_mask(model);
    let base_lr = model.lr();
    let mut rng = seed::rng(seed, &[seed::TAG_CONSOLIDATE, 0]);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        model.set_lr(cosine_lr(lr, epoch, epochs));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size.max(1)) {
            let x = features.select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let acts = model.forward_cached(&x)?;
            let out = cross_entropy(acts.logits(), &y, Some(&mask), 1.0)?;
            total += out.losses.iter().sum::<f64>();
            if let Err(e) = model.backward_step(&acts, &out.grad) {
                model.set_lr(base_lr);
                return Err(e);
            }
        }
        epoch_losses.push(total / buffer.len() as f64);
    }
    model.set_lr(base_lr);
    Ok(epoch_losses)
}

/// Summary of one consolidation pass, written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationReport {
    pub task: usize,
    pub mode: ConsolidationMode,
    pub gmm: Option<GmmSummary>,
    pub pure: usize,
    pub uncertain: usize,
    pub pre_buffer_accuracy: f64,
    pub post_buffer_accuracy: f64,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub iterations: usize,
}

impl From<&GmmFit> for GmmSummary {
    fn from(f: &GmmFit) -> Self {
        Self {
            means: f.means,
            variances: f.variances,
            weights: f.weights,
            iterations: f.log_likelihood.len() - 1,
        }
    }
}

/// `L_s + λ_u·L_u` on one mixed batch: soft cross-entropy on the mixed
/// labelled half, squared-error consistency on the mixed refined half.
/// Accumulates the gradient into the model and returns `(L_s, L_u)`.
#[allow(clippy::too_many_arguments)]
pub fn mixmatch_step(
    model: &mut ModelState,
    labeled_x: &Matrix,
    labeled_q: &Matrix,
    unlabeled_x: &Matrix,
    unlabeled_q: &Matrix,
    lambda_u: f64,
    mix: f64,
    perm: &[usize],
    mask: &ClassMask,
) -> Result<(f64, f64)> {
    let nl = labeled_x.rows();
    let nu = unlabeled_x.rows();
    let all_x = stack(labeled_x, unlabeled_x);
    let all_q = stack(labeled_q, unlabeled_q);
    let mixed_x = mixup(&all_x, perm, mix);
    let mixed_q = mixup(&all_q, perm, mix);
    let lx: Vec<usize> = (0..nl).collect();
    let ux: Vec<usize> = (nl..nl + nu).collect();

    let acts_l = model.forward_cached(&mixed_x.select_rows(&lx))?;
    let ls = soft_cross_entropy(acts_l.logits(), &mixed_q.select_rows(&lx), Some(mask), 1.0)?;
    let mut grads = model.backward(&acts_l, &ls.grad);
    let mut lu_mean = 0.0;
    if nu > 0 && lambda_u > 0.0 {
        let acts_u = model.forward_cached(&mixed_x.select_rows(&ux))?;
        let lu = consistency_mse(acts_u.logits(), &mixed_q.select_rows(&ux), Some(mask), lambda_u)?;
        lu_mean = lu.mean();
        grads.accumulate(&model.backward(&acts_u, &lu.grad));
    }
    model.apply_gradients(&grads)?;
    Ok((ls.mean(), lu_mean))
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols().max(b.cols()), data)
}

/// Row `i` becomes `mix·m[i] + (1 − mix)·m[perm[i]]`.
fn mixup(m: &Matrix, perm: &[usize], mix: f64) -> Matrix {
    let mut out = m.clone();
    for (i, &j) in perm.iter().enumerate() {
        for (dst, (&a, &b)) in out.row_mut(i).iter_mut().zip(m.row(i).iter().zip(m.row(j))) {
            *dst = mix * a + (1.0 - mix) * b;
        }
    }
    out
}

/// GMM split of fresh buffer losses, co-refinement of the uncertain part and
/// MixMatch-style training. Stored buffer labels are left untouched; true
/// labels are never read.
pub fn mixmatch_consolidate(
    model: &mut ModelState,
    buffer: &MemoryBuffer,
    cfg: &ConsolidationConfig,
    task: usize,
    seed: u64,
) -> Result<ConsolidationReport> {
    let lr = cfg.lr.unwrap_or(model.lr());
    let pre = buffer_accuracy(model, buffer)?;
    let losses = buffer.losses_under(model)?;
    let fit = if buffer.len() >= 4 {
        Some(fit_gmm_em(&losses, cfg.gmm_max_iter, cfg.gmm_tol)?)
    } else {
        None
    };
    let (pure, uncertain) = match &fit {
        Some(f) => split_pure_uncertain(f, cfg.threshold),
        None => (Vec::new(), Vec::new()),
    };
    if pure.is_empty() {
        log::warn!("no pure buffer entries at task {task}; falling back to buffer fit");
        buffer_fit(model, buffer, cfg.epochs, lr, cfg.batch_size, seed)?;
        return Ok(ConsolidationReport {
            task,
            mode: ConsolidationMode::Mixmatch,
            gmm: fit.as_ref().map(GmmSummary::from),
            pure: 0,
            uncertain: buffer.len(),
            pre_buffer_accuracy: pre,
            post_buffer_accuracy: buffer_accuracy(model, buffer)?,
            fell_back: true,
        });
    }
    let fit = fit.expect("pure set implies a fit");

    let features = buffer.features();
    let labels: Vec<usize> = buffer.entries().iter().map(|e| e.label).collect();
    let mask = class_mask(model);
    let classes = model.classes();
    let beta = Beta::new(cfg.mixup_alpha, cfg.mixup_alpha)
        .map_err(|e| Error::Config(format!("mixup beta: {e}")))?;
    let mut rng = seed::rng(seed, &[seed::TAG_CONSOLIDATE, task as u64, 1]);
    let base_lr = model.lr();
    let mut order = pure.clone();
    let mut step: u64 = 0;

    let result = (|| -> Result<()> {
        for epoch in 0..cfg.epochs {
            model.set_lr(cosine_lr(lr, epoch, cfg.epochs));
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                step += 1;
                let aug_seed = rng.random::<u64>();
                let lx = augment(&features.select_rows(chunk), aug_seed, cfg.augment_strength);
                let ly: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let lq = one_hot(&ly, classes);

                let (ux, uq) = if uncertain.is_empty() {
                    (Matrix::zeros(0, features.cols()), Matrix::zeros(0, classes))
                } else {
                    let pick: Vec<usize> = (0..chunk.len())
                        .map(|_| uncertain[rng.random_range(0..uncertain.len())])
                        .collect();
                    let raw = features.select_rows(&pick);
                    let u: Vec<f64> = pick.iter().map(|&i| fit.posteriors[i]).collect();
                    let y: Vec<usize> = pick.iter().map(|&i| labels[i]).collect();
                    let refined = corefine_labels(
                        model,
                        &raw,
                        &y,
                        &u,
                        cfg.augmentations,
                        cfg.augment_strength,
                        &mask,
                        seed::derive(seed, &[task as u64, step]),
                    )?;
                    let mut sharp = Matrix::zeros(refined.rows(), classes);
                    for i in 0..refined.rows() {
                        sharp
                            .row_mut(i)
                            .copy_from_slice(&sharpen(refined.row(i), cfg.temperature));
                    }
                    (augment(&raw, rng.random::<u64>(), cfg.augment_strength), sharp)
                };

                let mut perm: Vec<usize> = (0..lx.rows() + ux.rows()).collect();
                perm.shuffle(&mut rng);
                let lam: f64 = beta.sample(&mut rng);
                let lam = lam.max(1.0 - lam);
                mixmatch_step(model, &lx, &lq, &ux, &uq, cfg.lambda_u, lam, &perm, &mask)?;
            }
        }
        Ok(())
    })();
    model.set_lr(base_lr);
    result?;

    Ok(ConsolidationReport {
        task,
        mode: ConsolidationMode::Mixmatch,
        gmm: Some(GmmSummary::from(&fit)),
        pure: pure.len(),
        uncertain: uncertain.len(),
        pre_buffer_accuracy: pre,
        post_buffer_accuracy: buffer_accuracy(model, buffer)?,
        fell_back: false,
    })
}

/// Runs the configured consolidation; `None` mode is a no-op.
pub fn consolidate(
    model: &mut ModelState,
    buffer: &MemoryBuffer,
    cfg: &ConsolidationConfig,
    task: usize,
    seed: u64,
) -> Result<Option<ConsolidationReport>> {
    match cfg.mode {
        ConsolidationMode::None => Ok(None),
        ConsolidationMode::Mixmatch => mixmatch_consolidate(model, buffer, cfg, task, seed).map(Some),
        ConsolidationMode::BufferFit => {
            let pre = buffer_accuracy(model, buffer)?;
            let lr = cfg.lr.unwrap_or(model.lr());
            buffer_fit(
                model,
                buffer,
                cfg.epochs,
                lr,
                cfg.batch_size,
                seed::derive(seed, &[task as u64]),
            )?;
            Ok(Some(ConsolidationReport {
                task,
                mode: ConsolidationMode::BufferFit,
                gmm: None,
                pure: buffer.len(),
                uncertain: 0,
                pre_buffer_accuracy: pre,
                post_buffer_accuracy: buffer_accuracy(model, buffer)?,
                fell_back: false,
            }))
        }
    }
}
