use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    /// `superclasses[c]` is the superclass of class `c`. Required for
    /// asymmetric noise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclasses: Option<Vec<usize>>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn clean(seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate: 0.0,
            superclasses: None,
            seed,
        }
    }

    pub fn symmetric(rate: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Symmetric,
            rate,
            superclasses: None,
            seed,
        }
    }

    /// Consecutive class pairs `(0,1), (2,3), ...` as superclasses.
    pub fn paired_superclasses(classes: usize) -> Vec<usize> {
        (0..classes).map(|c| c / 2).collect()
    }

    fn validate(&self, classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "noise rate {} outside [0, 1]",
                self.rate
            )));
        }
        if self.kind == NoiseKind::Asymmetric {
            let map = self.superclasses.as_ref().ok_or_else(|| {
                Error::Input("asymmetric noise requires a superclass map".into())
            })?;
            if map.len() != classes {
                return Err(Error::Input(format!(
                    "superclass map covers {} classes, dataset has {classes}",
                    map.len()
                )));
            }
            for s in map {
                if map.iter().filter(|&x| x == s).count() < 2 {
                    return Err(Error::Input(format!(
                        "superclass {s} contains fewer than two classes"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Training examples carrying both the observed (possibly corrupted) label
/// and the hidden true label.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub features: Matrix,
    pub noisy: Vec<usize>,
    pub truth: Vec<usize>,
    pub classes: usize,
}

impl NoisyDataset {
    pub fn clean(data: &Dataset) -> Self {
        Self {
            features: data.features.clone(),
            noisy: data.labels.clone(),
            truth: data.labels.clone(),
            classes: data.classes,
        }
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn corrupted_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let bad = self
            .noisy
            .iter()
            .zip(&self.truth)
            .filter(|(a, b)| a != b)
            .count();
        bad as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCorruption {
    pub class: usize,
    pub total: usize,
    pub corrupted: usize,
}

/// Audit record of an injection, emitted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseManifest {
    pub seed: u64,
    pub spec: NoiseSpec,
    pub per_class: Vec<ClassCorruption>,
    pub corrupted_fraction: f64,
}

/// Flip targets allowed for each class: the other classes of its task, or
/// for asymmetric noise the single next class (cyclically) sharing both its
/// task and superclass.
fn flip_targets(
    spec: &NoiseSpec,
    classes: usize,
    task_classes: &[Vec<usize>],
) -> Result<Vec<Vec<usize>>> {
    let mut task_of = vec![usize::MAX; classes];
    for (t, cs) in task_classes.iter().enumerate() {
        for &c in cs {
            if c >= classes {
                return Err(Error::Input(format!("task {t} lists unknown class {c}")));
            }
            task_of[c] = t;
        }
    }
    let mut targets = Vec::with_capacity(classes);
    for c in 0..classes {
        let task = task_classes
            .get(task_of[c])
            .ok_or_else(|| Error::Input(format!("class {c} belongs to no task")))?;
        let t = match spec.kind {
            NoiseKind::Symmetric => task.iter().copied().filter(|&o| o != c).collect(),
            NoiseKind::Asymmetric => {
                let map = spec.superclasses.as_ref().unwrap();
                let mut group: Vec<usize> =
                    task.iter().copied().filter(|&o| map[o] == map[c]).collect();
                group.sort_unstable();
                if group.len() < 2 {
                    Vec::new()
                } else {
                    let pos = group.iter().position(|&o| o == c).unwrap();
                    vec![group[(pos + 1) % group.len()]]
                }
            }
        };
        if spec.rate > 0.0 && t.is_empty() {
            return Err(Error::Config(format!(
                "class {c} has no admissible flip target inside its task"
            )));
        }
        targets.push(t);
    }
    Ok(targets)
}

/// Corrupts labels once, independently per example, with probability
/// `spec.rate`. Flips never leave the example's task.
pub fn inject_noise(
    data: &Dataset,
    spec: &NoiseSpec,
    task_classes: &[Vec<usize>],
) -> Result<(NoisyDataset, NoiseManifest)> {
    spec.validate(data.classes)?;
    let targets = flip_targets(spec, data.classes, task_classes)?;
    let mut rng = seed::rng(spec.seed, &[seed::TAG_NOISE]);
    let mut noisy = Vec::with_capacity(data.len());
    for &y in &data.labels {
        // always consume both draws so the flip pattern does not depend on
        // which classes happen to precede an example
        let flip = rng.random::<f64>() < spec.rate;
        let pick = rng.random::<f64>();
        if flip {
            let t = &targets[y];
            let k = ((pick * t.len() as f64) as usize).min(t.len() - 1);
            noisy.push(t[k]);
        } else {
            noisy.push(y);
        }
    }
    let out = NoisyDataset {
        features: data.features.clone(),
        noisy,
        truth: data.labels.clone(),
        classes: data.classes,
    };
    let per_class = (0..data.classes)
        .map(|c| {
            let idx: Vec<usize> = (0..out.len()).filter(|&i| out.truth[i] == c).collect();
            ClassCorruption {
                class: c,
                total: idx.len(),
                corrupted: idx.iter().filter(|&&i| out.noisy[i] != c).count(),
            }
        })
        .collect();
    let manifest = NoiseManifest {
        seed: spec.seed,
        spec: spec.clone(),
        per_class,
        corrupted_fraction: out.corrupted_fraction(),
    };
    Ok((out, manifest))
}
