use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassMask, Matrix};
use crate::error::{Error, Result};
use crate::seed;

/// Layer widths of the perceptron.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        Self {
            input_dim,
            hidden,
            classes,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.classes);
        w
    }
}

/// Fully connected layer computing `x · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros_like(&self) -> Self {
        Self {
            weights: Matrix::zeros(self.weights.rows(), self.weights.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Inputs seen by every layer during a forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct Activations {
    inputs: Vec<Matrix>,
    logits: Matrix,
}

impl Activations {
    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    /// Output of the last hidden layer.
    pub fn penultimate(&self) -> &Matrix {
        self.inputs.last().expect("at least one layer")
    }
}

/// Parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

/// Network parameters, SGD state and the set of classes seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub(crate) layers: Vec<Dense>,
    pub(crate) velocity: Vec<Dense>,
    lr: f64,
    momentum: f64,
    seen: BTreeSet<usize>,
}

impl ModelState {
    /// He-initialised weights, zero biases.
    pub fn new(config: &MlpConfig, seed: u64, lr: f64, momentum: f64) -> Result<Self> {
        if config.input_dim == 0 || config.classes == 0 || config.hidden.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {config:?}")));
        }
        if !(lr >= 0.0 && lr.is_finite()) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "learning rate {lr} / momentum {momentum} out of range"
            )));
        }
        let mut rng = seed::rng(seed, &[seed::TAG_INIT]);
        let widths = config.widths();
        let layers: Vec<Dense> = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).unwrap();
                let data = (0..w[0] * w[1]).map(|_| normal.sample(&mut rng)).collect();
                Dense {
                    weights: Matrix::from_vec(w[0], w[1], data),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        let velocity = layers.iter().map(Dense::zeros_like).collect();
        Ok(Self {
            layers,
            velocity,
            lr,
            momentum,
            seen: BTreeSet::new(),
        })
    }

    /// Builds a model from explicit layers; used for hand-set test networks.
    pub fn from_layers(layers: Vec<Dense>, lr: f64, momentum: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("model needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].weights.cols() != w[1].weights.rows() {
                return Err(Error::Input("consecutive layer widths disagree".into()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.cols() {
                return Err(Error::Input("bias length differs from layer width".into()));
            }
        }
        let velocity = layers.iter().map(Dense::zeros_like).collect();
        Ok(Self {
            layers,
            velocity,
            lr,
            momentum,
            seen: BTreeSet::new(),
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().weights.cols()
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn seen_classes(&self) -> &BTreeSet<usize> {
        &self.seen
    }

    /// The seen-class set only ever grows.
    pub fn observe_classes(&mut self, classes: impl IntoIterator<Item = usize>) {
        self.seen.extend(classes);
    }

    pub fn seen_mask(&self) -> ClassMask {
        ClassMask::from_classes(self.classes(), self.seen.iter().copied())
    }

    /// Total parameter count.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn forward_cached(&self, features: &Matrix) -> Result<Activations> {
        if features.cols() != self.input_dim() {
            return Err(Error::Input(format!(
                "feature width {} does not match model input width {}",
                features.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = features.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul(&layer.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            if i < last {
                for v in z.as_mut_slice() {
                    *v = v.max(0.0);
                }
            }
            inputs.push(x);
            x = z;
        }
        Ok(Activations { inputs, logits: x })
    }

    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(features)?.logits)
    }

    /// Last hidden-layer activations (the feature embedding).
    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        let acts = self.forward_cached(features)?;
        Ok(acts.inputs.into_iter().last().unwrap())
    }

    /// Backpropagates `dlogits` (gradient of the scalar objective with
    /// respect to the logits) through the cached forward pass.
    pub fn backward(&self, acts: &Activations, dlogits: &Matrix) -> Gradients {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts.inputs[i];
            let dw = input.t_matmul(&delta);
            let mut db = vec![0.0; layer.bias.len()];
            for row in delta.iter_rows() {
                for (b, d) in db.iter_mut().zip(row) {
                    *b += d;
                }
            }
            grads.push(Dense {
                weights: dw,
                bias: db,
            });
            if i > 0 {
                let mut prev = delta.matmul_t(&layer.weights);
                // input[i] is the ReLU output of layer i-1
                for (g, &a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = prev;
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// One SGD (optionally momentum) update. Non-finite gradients leave the
    /// model untouched and return a numerical error naming the layer.
    pub fn apply_gradients(&mut self, grads: &Gradients) -> Result<()> {
        for (i, g) in grads.layers.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in layer {i} ({}x{})",
                    g.weights.rows(),
                    g.weights.cols()
                )));
            }
        }
        let (lr, mu) = (self.lr, self.momentum);
        for ((layer, vel), g) in self
            .layers
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(&grads.layers)
        {
            let pairs = layer
                .weights
                .as_mut_slice()
                .iter_mut()
                .chain(layer.bias.iter_mut())
                .zip(vel.weights.as_mut_slice().iter_mut().chain(vel.bias.iter_mut()))
                .zip(g.weights.as_slice().iter().chain(g.bias.iter()));
            for ((p, v), &d) in pairs {
                if mu > 0.0 {
                    *v = mu * *v + d;
                    *p -= lr * *v;
                } else {
                    *p -= lr * d;
                }
            }
        }
        if !self.layers.iter().all(Dense::is_finite) {
            return Err(Error::Numerical(
                "parameters became non-finite after update".into(),
            ));
        }
        Ok(())
    }

    /// Backward pass plus update in one call.
    pub fn backward_step(&mut self, acts: &Activations, dlogits: &Matrix) -> Result<()> {
        let grads = self.backward(acts, dlogits);
        self.apply_gradients(&grads)
    }

    /// Class predictions restricted to the seen classes (all classes if none
    /// seen yet).
    pub fn predict(&self, features: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(features)?;
        let mask = if self.seen.is_empty() {
            ClassMask::all(self.classes())
        } else {
            self.seen_mask()
        };
        Ok(logits
            .iter_rows()
            .map(|row| {
                let mut best = usize::MAX;
                for (c, &v) in row.iter().enumerate() {
                    if mask.contains(c) && (best == usize::MAX || v > row[best]) {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}
