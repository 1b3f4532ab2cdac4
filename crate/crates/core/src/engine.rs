//! Per-task training loop: alternating buffer-learning and buffer-forgetting
//! epochs, replay, checkpoint restores, and the baseline methods.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{
    self, gdumb_update, insert_candidates, insertion_candidates, BufferEntry, MemoryBuffer,
    Selector,
};
use crate::consolidation::{buffer_fit, consolidate, ConsolidationConfig, ConsolidationReport};
use crate::error::{Error, Result};
use crate::eval::{accuracy, separation_trace, AccuracyMatrix, EpochMode, EpochTrace};
use crate::seed;
use crate::stream::{
    inject_noise, task_classes, train_test_split, Batch, Dataset, NoiseManifest, NoiseSpec,
    TaskStream,
};
use crate::tensor::{cross_entropy, ClassMask, Matrix, MlpConfig, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Finetune,
    Joint,
    Er,
    ErAce,
    Gdumb,
    AerAbs,
    AerLass,
    ErAceAbs,
    /// ER-ACE with low-loss candidate filtering, reservoir placement.
    ErAceAlpha,
    /// Alternating epochs with reservoir placement.
    AerReservoir,
    /// Alternating epochs with balanced sampling but symmetric replay loss.
    AerAbsNoAce,
}

impl Method {
    pub const ALL: [Method; 11] = [
        Method::Finetune,
        Method::Joint,
        Method::Er,
        Method::ErAce,
        Method::Gdumb,
        Method::AerAbs,
        Method::AerLass,
        Method::ErAceAbs,
        Method::ErAceAlpha,
        Method::AerReservoir,
        Method::AerAbsNoAce,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::ErAce => "er_ace",
            Method::Gdumb => "gdumb",
            Method::AerAbs => "aer_abs",
            Method::AerLass => "aer_lass",
            Method::ErAceAbs => "er_ace_abs",
            Method::ErAceAlpha => "er_ace_alpha",
            Method::AerReservoir => "aer_reservoir",
            Method::AerAbsNoAce => "aer_abs_no_ace",
        }
    }

    /// Stream and replay losses share a rehearsal buffer.
    pub fn replays(self) -> bool {
        !matches!(self, Method::Finetune | Method::Joint | Method::Gdumb)
    }

    /// Stream loss restricted to the current task's classes.
    pub fn asymmetric(self) -> bool {
        matches!(
            self,
            Method::ErAce
                | Method::ErAceAlpha
                | Method::ErAceAbs
                | Method::AerAbs
                | Method::AerLass
                | Method::AerReservoir
        )
    }

    pub fn alternates(self) -> bool {
        matches!(
            self,
            Method::AerAbs | Method::AerLass | Method::AerReservoir | Method::AerAbsNoAce
        )
    }

    /// Only the lowest-loss part of each batch is offered to the buffer.
    pub fn filters(self) -> bool {
        self.replays() && !matches!(self, Method::Er | Method::ErAce)
    }

    pub fn selector(self) -> Selector {
        match self {
            Method::AerAbs | Method::ErAceAbs | Method::AerAbsNoAce => Selector::Abs,
            Method::AerLass => Selector::Lass,
            _ => Selector::Reservoir,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    /// Stream and replay batch size.
    pub batch_size: usize,
    pub buffer_size: usize,
    /// Percentage of each batch withheld from insertion (highest losses).
    pub alpha: f64,
    pub epochs: usize,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::AerAbs,
            lr: 0.03,
            momentum: 0.0,
            batch_size: 32,
            buffer_size: 500,
            alpha: 75.0,
            epochs: 10,
            hidden: vec![64, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.buffer_size == 0 && self.method.replays() || self.buffer_size == 0 && self.method == Method::Gdumb {
            return bad("buffer_size", "must be >= 1 for buffer-based methods");
        }
        if !(0.0..=100.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 100]");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochSchedule {
    pub modes: Vec<EpochMode>,
    /// A single epoch cannot alternate; it learns and inserts at once.
    pub degenerate: bool,
}

impl EpochSchedule {
    pub fn count(&self, mode: EpochMode) -> usize {
        self.modes.iter().filter(|&&m| m == mode).count()
    }
}

/// Learning first, then strict alternation.
pub fn alternation_schedule(epochs: usize) -> Result<EpochSchedule> {
    if epochs == 0 {
        return Err(Error::Config("at least one epoch per task is required".into()));
    }
    let modes = (0..epochs)
        .map(|e| {
            if e % 2 == 0 {
                EpochMode::Learning
            } else {
                EpochMode::Forgetting
            }
        })
        .collect();
    Ok(EpochSchedule {
        modes,
        degenerate: epochs == 1,
    })
}

/// `k` buffer entries, uniformly with replacement when the buffer holds
/// fewer than `k`, without replacement otherwise.
pub fn replay_batch(buffer: &MemoryBuffer, k: usize, rng: &mut impl Rng) -> Batch {
    let n = buffer.len();
    if n == 0 || k == 0 {
        let dims = buffer.entries().first().map_or(0, |e| e.features.len());
        return Batch::empty(dims);
    }
    let idx: Vec<usize> = if n < k {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    } else {
        index::sample(rng, n, k).into_vec()
    };
    let entries = buffer.entries();
    let rows: Vec<&[f64]> = idx.iter().map(|&i| entries[i].features.as_slice()).collect();
    Batch {
        features: Matrix::from_rows(&rows),
        noisy: idx.iter().map(|&i| entries[i].label).collect(),
        truth: idx.iter().map(|&i| entries[i].truth).collect(),
        task: idx.iter().map(|&i| entries[i].task).collect(),
    }
}

/// Training stream plus clean per-task test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub stream: TaskStream,
    pub test: Vec<Dataset>,
}

impl Benchmark {
    /// Holds out `test_fraction` of every class, corrupts the remaining
    /// labels within tasks and splits both parts into tasks.
    pub fn build(
        data: &Dataset,
        noise: &NoiseSpec,
        tasks: usize,
        batch_size: usize,
        test_fraction: f64,
        seed: u64,
    ) -> Result<(Self, NoiseManifest)> {
        let groups = task_classes(data.classes, tasks)?;
        let (train, test) = train_test_split(data, test_fraction, seed)?;
        let (noisy, manifest) = inject_noise(&train, noise, &groups)?;
        let stream = TaskStream::from_groups(&noisy, groups.clone(), batch_size, seed)?;
        let test = groups
            .iter()
            .map(|g| test.subset(&test.indices_of(g)))
            .collect();
        Ok((Self { stream, test }, manifest))
    }

    pub fn num_tasks(&self) -> usize {
        self.stream.num_tasks()
    }

    /// The same benchmark with every training label restored.
    pub fn clean(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.stream.tasks {
            t.noisy = t.truth.clone();
        }
        out
    }
}

/// What one method produces on one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub accuracy: AccuracyMatrix,
    pub trace: Vec<EpochTrace>,
    /// Buffer snapshot at the end of every task.
    pub buffers: Vec<MemoryBuffer>,
    pub reports: Vec<ConsolidationReport>,
    pub purity: f64,
    pub diversity: Option<f64>,
}

/// Mutable state of one run: model, buffer and the run's random streams.
pub struct Learner {
    cfg: TrainConfig,
    consolidation: ConsolidationConfig,
    seed: u64,
    pub model: ModelState,
    pub buffer: MemoryBuffer,
    replay_rng: ChaCha8Rng,
    select_rng: ChaCha8Rng,
    global_epoch: usize,
    trace: Vec<EpochTrace>,
}

impl Learner {
    pub fn new(
        cfg: &TrainConfig,
        consolidation: &ConsolidationConfig,
        dims: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        consolidation.validate()?;
        let model = ModelState::new(
            &MlpConfig::new(dims, cfg.hidden.clone(), classes),
            seed,
            cfg.lr,
            cfg.momentum,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            consolidation: consolidation.clone(),
            seed,
            model,
            buffer: MemoryBuffer::new(cfg.buffer_size.max(1))?,
            replay_rng: seed::rng(seed, &[seed::TAG_REPLAY]),
            select_rng: seed::rng(seed, &[seed::TAG_SELECT]),
            global_epoch: 0,
            trace: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn trace(&self) -> &[EpochTrace] {
        &self.trace
    }

    /// Writes the model checkpoint and buffer contents for post-mortem use;
    /// returns the directory.
    pub fn dump_state(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join("model.ckpt");
        std::fs::write(&ckpt, &self.model.save_checkpoint(self.global_epoch).bytes)
            .map_err(|e| Error::io(&ckpt, e))?;
        self.buffer.dump_jsonl(dir.join("buffer.jsonl"))?;
        Ok(dir.to_path_buf())
    }

    fn stream_mask(&self, classes: &[usize]) -> ClassMask {
        if self.cfg.method.asymmetric() {
            ClassMask::from_classes(self.model.classes(), classes.iter().copied())
        } else {
            self.model.seen_mask()
        }
    }

    /// One optimisation step on a stream batch; returns the summed stream
    /// loss.
    fn step(&mut self, batch: &Batch, task: usize, stream_mask: &ClassMask, replay: bool, insert: bool) -> Result<f64> {
        let method = self.cfg.method;
        let seen = self.model.seen_mask();
        let acts = self.model.forward_cached(&batch.features)?;
        let out = cross_entropy(acts.logits(), &batch.noisy, Some(stream_mask), 1.0)?;
        let mut grads = self.model.backward(&acts, &out.grad);

        let mut candidates = Vec::new();
        if insert {
            let losses = out.losses.clone();
            let picked: Vec<usize> = if method.filters() {
                insertion_candidates(&losses, self.cfg.alpha)
            } else {
                (0..batch.len()).collect()
            };
            candidates = picked
                .into_iter()
                .map(|i| BufferEntry {
                    features: batch.features.row(i).to_vec(),
                    label: batch.noisy[i],
                    truth: batch.truth[i],
                    task,
                    loss: losses[i],
                    tick: 0,
                })
                .collect();
            // replacement scores come from the pre-update model
            let replacing = self.buffer.len() + candidates.len() > self.buffer.capacity();
            if replacing && method.selector() != Selector::Reservoir && !candidates.is_empty() {
                self.buffer.refresh_losses(&self.model)?;
            }
        }

        if replay && !self.buffer.is_empty() {
            let rb = replay_batch(&self.buffer, self.cfg.batch_size, &mut self.replay_rng);
            let racts = self.model.forward_cached(&rb.features)?;
            let rout = cross_entropy(racts.logits(), &rb.noisy, Some(&seen), 1.0)?;
            grads.accumulate(&self.model.backward(&racts, &rout.grad));
        }
        self.model.apply_gradients(&grads)?;

        if !candidates.is_empty() {
            insert_candidates(&mut self.buffer, candidates, method.selector(), task, &mut self.select_rng);
        }
        Ok(out.losses.iter().sum())
    }

    /// Trains on task `task` for the configured number of epochs and returns
    /// that task's trace lines.
    pub fn train_task(&mut self, stream: &TaskStream, task: usize) -> Result<Vec<EpochTrace>> {
        let data = stream
            .tasks
            .get(task)
            .ok_or_else(|| Error::Input(format!("task {task} out of range")))?;
        let classes = data.classes.clone();
        self.model.observe_classes(classes.iter().copied());
        let method = self.cfg.method;
        let schedule = alternation_schedule(self.cfg.epochs)?;
        if method.alternates() && schedule.degenerate {
            log::warn!("one epoch per task cannot alternate; learning and inserting in the same epoch");
        }
        let stream_mask = self.stream_mask(&classes);
        let mut lines = Vec::with_capacity(self.cfg.epochs);

        for epoch in 0..self.cfg.epochs {
            let (mode, replay, insert, restore) = if method.alternates() {
                let mode = schedule.modes[epoch];
                let forgetting = mode == EpochMode::Forgetting;
                (mode, !forgetting, forgetting || schedule.degenerate, forgetting)
            } else {
                (EpochMode::Learning, method.replays(), method.replays(), false)
            };

            let ckpt = restore.then(|| self.model.save_checkpoint(epoch));
            let frozen_hash = (!insert).then(|| self.buffer.content_hash());

            let mut total = 0.0;
            for batch in stream.epoch_batches(task, epoch)? {
                total += self.step(&batch, task, &stream_mask, replay, insert)?;
            }

            let sep = separation_trace(&self.buffer, &self.model)?;
            let purity = buffer::purity(&self.buffer).overall;

            let params_restored = match &ckpt {
                Some(c) => {
                    self.model.restore_checkpoint(c)?;
                    let same = self.model.save_checkpoint(epoch).bytes == c.bytes;
                    if !same {
                        return Err(Error::Invariant(format!(
                            "parameters differ after restore at task {task} epoch {epoch}"
                        )));
                    }
                    Some(true)
                }
                None => None,
            };
            let buffer_frozen = match frozen_hash {
                Some(h) => {
                    if h != self.buffer.content_hash() {
                        return Err(Error::Invariant(format!(
                            "buffer changed during frozen epoch {epoch} of task {task}"
                        )));
                    }
                    Some(true)
                }
                None => None,
            };

            lines.push(EpochTrace {
                task,
                epoch,
                global_epoch: self.global_epoch,
                mode,
                inserting: insert,
                stream_loss: Some(total / data.len().max(1) as f64),
                clean_loss: sep.clean,
                noisy_loss: sep.noisy,
                purity,
                buffer_len: self.buffer.len(),
                params_restored,
                buffer_frozen,
                accuracy_row: None,
            });
            self.global_epoch += 1;
        }
        Ok(lines)
    }

    /// Greedy class-balanced fill from one pass over the task, then a fresh
    /// model fitted on the buffer alone.
    fn gdumb_task(&mut self, stream: &TaskStream, task: usize) -> Result<(ModelState, EpochTrace)> {
        let data = &stream.tasks[task];
        self.model.observe_classes(data.classes.iter().copied());
        for batch in stream.epoch_batches(task, 0)? {
            for i in 0..batch.len() {
                let item = BufferEntry {
                    features: batch.features.row(i).to_vec(),
                    label: batch.noisy[i],
                    truth: batch.truth[i],
                    task,
                    loss: 0.0,
                    tick: 0,
                };
                gdumb_update(&mut self.buffer, item, &mut self.select_rng);
            }
        }
        let mut fresh = ModelState::new(
            &MlpConfig::new(self.model.input_dim(), self.cfg.hidden.clone(), self.model.classes()),
            seed::derive(self.seed, &[task as u64 + 1]),
            self.cfg.lr,
            self.cfg.momentum,
        )?;
        fresh.observe_classes(self.model.seen_classes().iter().copied());
        buffer_fit(
            &mut fresh,
            &self.buffer,
            self.consolidation.epochs,
            self.consolidation.lr.unwrap_or(self.cfg.lr),
            self.consolidation.batch_size,
            seed::derive(self.seed, &[seed::TAG_CONSOLIDATE, task as u64]),
        )?;
        let sep = separation_trace(&self.buffer, &fresh)?;
        let line = EpochTrace {
            task,
            epoch: 0,
            global_epoch: self.global_epoch,
            mode: EpochMode::Learning,
            inserting: true,
            stream_loss: None,
            clean_loss: sep.clean,
            noisy_loss: sep.noisy,
            purity: buffer::purity(&self.buffer).overall,
            buffer_len: self.buffer.len(),
            params_restored: None,
            buffer_frozen: None,
            accuracy_row: None,
        };
        self.global_epoch += 1;
        Ok((fresh, line))
    }

    fn evaluate(model: &ModelState, bench: &Benchmark, upto: usize) -> Result<Vec<f64>> {
        (0..=upto).map(|j| accuracy(model, &bench.test[j])).collect()
    }

    /// Runs every task of `bench`. `reference` enables the diversity metric.
    pub fn run(&mut self, bench: &Benchmark, reference: Option<&ModelState>) -> Result<RunOutcome> {
        let tasks = bench.num_tasks();
        if bench.test.len() != tasks {
            return Err(Error::Input("one test split per task is required".into()));
        }
        let mut matrix = AccuracyMatrix::new(tasks);
        let mut buffers = Vec::with_capacity(tasks);
        let mut reports = Vec::new();

        if self.cfg.method == Method::Joint {
            let merged = bench.stream.merged();
            let mut lines = self.train_task(&merged, 0)?;
            let finals = Self::evaluate(&self.model, bench, tasks - 1)?;
            for t in 0..tasks {
                matrix.push_row(finals[..=t].to_vec())?;
            }
            if let Some(last) = lines.last_mut() {
                last.accuracy_row = Some(finals);
            }
            self.trace.extend(lines);
            return Ok(RunOutcome {
                accuracy: matrix,
                trace: self.trace.clone(),
                buffers,
                reports,
                purity: 0.0,
                diversity: None,
            });
        }

        let mut eval_model = None;
        for t in 0..tasks {
            let mut lines = if self.cfg.method == Method::Gdumb {
                let (fresh, line) = self.gdumb_task(&bench.stream, t)?;
                eval_model = Some(fresh);
                vec![line]
            } else {
                let lines = self.train_task(&bench.stream, t)?;
                if self.cfg.method.replays() {
                    if let Some(r) = consolidate(&mut self.model, &self.buffer, &self.consolidation, t, self.seed)? {
                        reports.push(r);
                    }
                }
                lines
            };
            let model = eval_model.as_ref().unwrap_or(&self.model);
            let row = Self::evaluate(model, bench, t)?;
            matrix.push_row(row.clone())?;
            if let Some(last) = lines.last_mut() {
                last.accuracy_row = Some(row);
            }
            self.trace.extend(lines);
            buffers.push(self.buffer.clone());
        }

        let uses_buffer = self.cfg.method.replays() || self.cfg.method == Method::Gdumb;
        let purity = if uses_buffer {
            buffer::purity(&self.buffer).overall
        } else {
            0.0
        };
        let diversity = match reference {
            Some(r) if uses_buffer => Some(buffer::diversity(&self.buffer, r)?.overall),
            _ => None,
        };
        Ok(RunOutcome {
            accuracy: matrix,
            trace: self.trace.clone(),
            buffers,
            reports,
            purity,
            diversity,
        })
    }
}

/// A model trained jointly on the clean labels, used as the feature
/// extractor of the diversity metric.
pub fn train_reference(bench: &Benchmark, cfg: &TrainConfig, seed: u64) -> Result<ModelState> {
    let stream = bench.clean().stream.merged();
    let ref_cfg = TrainConfig {
        method: Method::Joint,
        ..cfg.clone()
    };
    let mut learner = Learner::new(
        &ref_cfg,
        &ConsolidationConfig::default(),
        stream.dims(),
        stream.classes,
        seed::derive(seed, &[seed::TAG_REFERENCE]),
    )?;
    learner.train_task(&stream, 0)?;
    Ok(learner.model)
}
