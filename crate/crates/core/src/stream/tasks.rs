use rand::seq::SliceRandom;

use super::NoisyDataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Matrix;

/// Contiguous class groups: task `t` owns classes `t·k .. (t+1)·k`.
pub fn task_classes(classes: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks == 0 || !classes.is_multiple_of(tasks) {
        return Err(Error::Config(format!(
            "{classes} classes cannot be split evenly into {tasks} tasks"
        )));
    }
    let k = classes / tasks;
    Ok((0..tasks).map(|t| (t * k..(t + 1) * k).collect()).collect())
}

/// Training examples of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub id: usize,
    pub classes: Vec<usize>,
    pub features: Matrix,
    pub noisy: Vec<usize>,
    pub truth: Vec<usize>,
}

impl TaskData {
    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }
}

/// A minibatch. `truth` is carried for auditing only.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub noisy: Vec<usize>,
    pub truth: Vec<usize>,
    pub task: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.noisy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noisy.is_empty()
    }

    pub fn empty(dims: usize) -> Self {
        Self {
            features: Matrix::zeros(0, dims),
            noisy: Vec::new(),
            truth: Vec::new(),
            task: Vec::new(),
        }
    }
}

/// Ordered class-incremental tasks with disjoint class sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub batch_size: usize,
    pub seed: u64,
    pub classes: usize,
}

/// Partitions `data` into tasks of contiguous class groups. Task membership
/// follows the true label; noise never crosses task boundaries.
pub fn split_tasks(
    data: &NoisyDataset,
    tasks: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TaskStream> {
    let groups = task_classes(data.classes, tasks)?;
    TaskStream::from_groups(data, groups, batch_size, seed)
}

impl TaskStream {
    pub fn from_groups(
        data: &NoisyDataset,
        groups: Vec<Vec<usize>>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut out = Vec::with_capacity(groups.len());
        for (id, classes) in groups.into_iter().enumerate() {
            let idx: Vec<usize> = (0..data.len())
                .filter(|&i| classes.contains(&data.truth[i]))
                .collect();
            if let Some(&i) = idx.iter().find(|&&i| !classes.contains(&data.noisy[i])) {
                return Err(Error::Input(format!(
                    "example {i} has noisy label {} outside task {id}",
                    data.noisy[i]
                )));
            }
            out.push(TaskData {
                id,
                features: data.features.select_rows(&idx),
                noisy: idx.iter().map(|&i| data.noisy[i]).collect(),
                truth: idx.iter().map(|&i| data.truth[i]).collect(),
                classes,
            });
        }
        Ok(Self {
            tasks: out,
            batch_size,
            seed,
            classes: data.classes,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dims(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.features.cols())
    }

    /// All tasks collapsed into one (the joint setting).
    pub fn merged(&self) -> TaskStream {
        let mut classes = Vec::new();
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut noisy = Vec::new();
        let mut truth = Vec::new();
        for t in &self.tasks {
            classes.extend(&t.classes);
            rows.extend(t.features.iter_rows());
            noisy.extend(&t.noisy);
            truth.extend(&t.truth);
        }
        TaskStream {
            tasks: vec![TaskData {
                id: 0,
                classes,
                features: Matrix::from_rows(&rows),
                noisy,
                truth,
            }],
            batch_size: self.batch_size,
            seed: self.seed,
            classes: self.classes,
        }
    }

    /// Batches of task `task` for epoch `epoch`. The order depends only on
    /// `(seed, task, epoch)`; the iterator ends at the end of the epoch.
    pub fn epoch_batches(&self, task: usize, epoch: usize) -> Result<EpochBatches<'_>> {
        let data = self.tasks.get(task).ok_or_else(|| {
            Error::Input(format!("task {task} out of range ({})", self.tasks.len()))
        })?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = seed::rng(self.seed, &[seed::TAG_SHUFFLE, task as u64, epoch as u64]);
        order.shuffle(&mut rng);
        Ok(EpochBatches {
            data,
            order,
            pos: 0,
            batch_size: self.batch_size,
        })
    }

    /// The `index`-th batch of an epoch, `None` once the epoch is exhausted.
    pub fn next_batch(&self, task: usize, epoch: usize, index: usize) -> Result<Option<Batch>> {
        Ok(self.epoch_batches(task, epoch)?.nth(index))
    }
}

pub struct EpochBatches<'a> {
    data: &'a TaskData,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl Iterator for EpochBatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            features: self.data.features.select_rows(idx),
            noisy: idx.iter().map(|&i| self.data.noisy[i]).collect(),
            truth: idx.iter().map(|&i| self.data.truth[i]).collect(),
            task: vec![self.data.id; idx.len()],
        })
    }
}
