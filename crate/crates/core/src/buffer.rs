//! Fixed-capacity rehearsal memory and its replacement policies.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{per_sample_ce, ClassMask, Matrix, ModelState};

/// Floor on replacement scores keeping loss-proportional distributions well
/// defined when every loss is zero.
pub const SCORE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferEntry {
    pub features: Vec<f64>,
    /// Stored (observed) label.
    pub label: usize,
    /// True label; only read by audit metrics.
    pub truth: usize,
    pub task: usize,
    pub loss: f64,
    #[serde(default)]
    pub tick: u64,
}

/// How a full buffer picks the slot a new candidate overwrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    /// Uniform slot, classic reservoir.
    Reservoir,
    /// Loss-proportional over the whole buffer.
    Lass,
    /// Asymmetric balanced: current task by loss, past tasks by reversed loss.
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Append,
    Replace(usize),
    Reject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: Vec<BufferEntry>,
    n_seen: u64,
    task_counts: BTreeMap<usize, usize>,
    tick: u64,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("buffer capacity must be >= 1".into()));
        }
        Ok(Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            n_seen: 0,
            task_counts: BTreeMap::new(),
            tick: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[BufferEntry] {
        &self.entries
    }

    /// Number of items offered to the reservoir so far.
    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn task_count(&self, task: usize) -> usize {
        self.task_counts.get(&task).copied().unwrap_or(0)
    }

    pub fn task_counts(&self) -> &BTreeMap<usize, usize> {
        &self.task_counts
    }

    fn stamp(&mut self, mut entry: BufferEntry) -> BufferEntry {
        self.tick += 1;
        entry.tick = self.tick;
        entry
    }

    /// Appends while below capacity; panics when full.
    pub fn push(&mut self, entry: BufferEntry) {
        assert!(!self.is_full(), "push into a full buffer");
        *self.task_counts.entry(entry.task).or_default() += 1;
        let entry = self.stamp(entry);
        self.entries.push(entry);
    }

    /// Overwrites `slot`, keeping the per-task partition counts exact.
    pub fn overwrite(&mut self, slot: usize, entry: BufferEntry) {
        let old = self.entries[slot].task;
        let count = self.task_counts.get_mut(&old).expect("tracked task");
        *count -= 1;
        if *count == 0 {
            self.task_counts.remove(&old);
        }
        *self.task_counts.entry(entry.task).or_default() += 1;
        let entry = self.stamp(entry);
        self.entries[slot] = entry;
    }

    pub fn remove(&mut self, slot: usize) -> BufferEntry {
        let e = self.entries.swap_remove(slot);
        let count = self.task_counts.get_mut(&e.task).expect("tracked task");
        *count -= 1;
        if *count == 0 {
            self.task_counts.remove(&e.task);
        }
        e
    }

    /// Reservoir gate: counts the offered item and decides where it goes.
    pub fn reservoir_admit(&mut self, rng: &mut impl Rng) -> Admission {
        self.n_seen += 1;
        if !self.is_full() {
            return Admission::Append;
        }
        let j = rng.random_range(0..self.n_seen);
        if (j as usize) < self.capacity && j < self.capacity as u64 {
            Admission::Replace(j as usize)
        } else {
            Admission::Reject
        }
    }

    /// Classic reservoir sampling; returns the slot written, if any.
    pub fn reservoir_update(&mut self, item: BufferEntry, rng: &mut impl Rng) -> Option<usize> {
        match self.reservoir_admit(rng) {
            Admission::Append => {
                self.push(item);
                Some(self.len() - 1)
            }
            Admission::Replace(slot) => {
                self.overwrite(slot, item);
                Some(slot)
            }
            Admission::Reject => None,
        }
    }

    /// Recomputes every cached loss under `model`, cross-entropy over the
    /// model's seen classes.
    pub fn refresh_losses(&mut self, model: &ModelState) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let losses = self.losses_under(model)?;
        for (e, l) in self.entries.iter_mut().zip(losses) {
            e.loss = l;
        }
        Ok(())
    }

    /// Per-entry losses under `model` without touching the cache.
    pub fn losses_under(&self, model: &ModelState) -> Result<Vec<f64>> {
        let x = self.features();
        let logits = model.forward(&x)?;
        let labels: Vec<usize> = self.entries.iter().map(|e| e.label).collect();
        let mut mask = model.seen_mask();
        if mask.is_empty() {
            mask = ClassMask::all(model.classes());
        }
        // stored labels are always among the seen classes once the task that
        // produced them has started
        per_sample_ce(&logits, &labels, Some(&mask))
    }

    pub fn features(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.entries.iter().map(|e| e.features.as_slice()).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, 0);
        }
        Matrix::from_rows(&rows)
    }

    /// Content digest over features, labels and task ids.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            for v in &e.features {
                h.update(v.to_le_bytes());
            }
            h.update((e.label as u64).to_le_bytes());
            h.update((e.truth as u64).to_le_bytes());
            h.update((e.task as u64).to_le_bytes());
            h.update(e.tick.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One JSON object per line.
    pub fn dump_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e).expect("entries serialise");
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_jsonl(path: impl AsRef<Path>, capacity: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut buf = MemoryBuffer::new(capacity)?;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: BufferEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: err.to_string(),
            })?;
            if buf.is_full() {
                return Err(Error::Input(format!(
                    "{} holds more than {capacity} entries",
                    path.display()
                )));
            }
            buf.push(e);
        }
        Ok(buf)
    }
}

/// Indices of the `floor((1 - α/100)·n)` lowest-loss samples, ties broken by
/// lower index. The result is sorted by loss.
pub fn insertion_candidates(losses: &[f64], alpha: f64) -> Vec<usize> {
    let alpha = alpha.clamp(0.0, 100.0);
    let n = losses.len();
    let k = (((100.0 - alpha) / 100.0) * n as f64 + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    idx.truncate(k.min(n));
    idx
}

fn normalize(scores: Vec<f64>) -> Vec<f64> {
    let z: f64 = scores.iter().sum();
    scores.into_iter().map(|s| s / z).collect()
}

/// Replacement distribution over all entries, `p ∝ max(loss, ε)`.
pub fn lass_scores(buffer: &MemoryBuffer) -> Vec<f64> {
    normalize(
        buffer
            .entries()
            .iter()
            .map(|e| e.loss.max(SCORE_EPS))
            .collect(),
    )
}

/// Within-partition replacement distributions for ABS, each over all slots
/// (zero outside the partition). Current task: `p ∝ max(loss, ε)`. Past
/// tasks: `p ∝ max(max_past_loss − loss, ε)`. An empty partition yields `None`.
pub fn abs_partition_probs(
    buffer: &MemoryBuffer,
    current_task: usize,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cur, past) = abs_weights(buffer.entries(), current_task);
    let norm = |w: Vec<f64>| {
        if w.iter().any(|&x| x > 0.0) {
            Some(normalize(w))
        } else {
            None
        }
    };
    (norm(cur), norm(past))
}

fn abs_weights(entries: &[BufferEntry], current_task: usize) -> (Vec<f64>, Vec<f64>) {
    let max_past = entries
        .iter()
        .filter(|e| e.task != current_task)
        .map(|e| e.loss)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut cur = vec![0.0; entries.len()];
    let mut past = vec![0.0; entries.len()];
    for (i, e) in entries.iter().enumerate() {
        if e.task == current_task {
            cur[i] = e.loss.max(SCORE_EPS);
        } else {
            past[i] = (max_past - e.loss).max(SCORE_EPS);
        }
    }
    (cur, past)
}

/// Slot sampler whose scores are frozen at construction (once per batch
/// step). A slot is drawn at most once.
pub struct ReplacementSampler {
    selector: Selector,
    current_task: usize,
    weights: Vec<f64>,
    /// Partition of each slot at scoring time (ABS only).
    is_current: Vec<bool>,
    taken: Vec<bool>,
}

impl ReplacementSampler {
    pub fn new(buffer: &MemoryBuffer, selector: Selector, current_task: usize) -> Self {
        let entries = buffer.entries();
        let (weights, is_current) = match selector {
            Selector::Reservoir => (vec![1.0; entries.len()], vec![false; entries.len()]),
            Selector::Lass => (
                entries.iter().map(|e| e.loss.max(SCORE_EPS)).collect(),
                vec![false; entries.len()],
            ),
            Selector::Abs => {
                let (cur, past) = abs_weights(entries, current_task);
                let flags = entries.iter().map(|e| e.task == current_task).collect();
                (cur.iter().zip(&past).map(|(a, b)| a + b).collect(), flags)
            }
        };
        Self {
            selector,
            current_task,
            taken: vec![false; weights.len()],
            weights,
            is_current,
        }
    }

    fn weighted_pick(&self, rng: &mut impl Rng, admit: impl Fn(usize) -> bool) -> Option<usize> {
        let total: f64 = (0..self.weights.len())
            .filter(|&i| !self.taken[i] && admit(i))
            .map(|i| self.weights[i])
            .sum();
        if total <= 0.0 {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut last = None;
        for i in 0..self.weights.len() {
            if self.taken[i] || !admit(i) {
                continue;
            }
            last = Some(i);
            u -= self.weights[i];
            if u < 0.0 {
                return Some(i);
            }
        }
        last
    }

    /// Draws the next slot to overwrite. `buffer` supplies the live partition
    /// sizes for the ABS Bernoulli draw.
    pub fn draw(&mut self, buffer: &MemoryBuffer, rng: &mut impl Rng) -> Option<usize> {
        if self.weights.is_empty() {
            return None;
        }
        let slot = match self.selector {
            Selector::Reservoir | Selector::Lass => self.weighted_pick(rng, |_| true),
            Selector::Abs => {
                let p_cur = buffer.task_count(self.current_task) as f64 / buffer.len() as f64;
                let want_current = rng.random::<f64>() < p_cur;
                let flags = &self.is_current;
                self.weighted_pick(rng, |i| flags[i] == want_current)
                    .or_else(|| self.weighted_pick(rng, |i| flags[i] != want_current))
            }
        }?;
        self.taken[slot] = true;
        Some(slot)
    }
}

/// One ABS draw from the cached losses.
pub fn abs_select(buffer: &MemoryBuffer, current_task: usize, rng: &mut impl Rng) -> Option<usize> {
    ReplacementSampler::new(buffer, Selector::Abs, current_task).draw(buffer, rng)
}

/// Writes already-admitted candidates: appended while below capacity,
/// otherwise each overwrites a distinct slot drawn by `selector` with scores
/// frozen for the whole call. When more candidates remain than the buffer
/// holds, only the last `capacity` of them are written.
pub fn replace_with_candidates(
    buffer: &mut MemoryBuffer,
    candidates: Vec<BufferEntry>,
    selector: Selector,
    current_task: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut written = Vec::with_capacity(candidates.len());
    let mut rest = candidates.into_iter();
    while !buffer.is_full() {
        match rest.next() {
            Some(c) => {
                buffer.push(c);
                written.push(buffer.len() - 1);
            }
            None => return written,
        }
    }
    let rest: Vec<BufferEntry> = rest.collect();
    let skip = rest.len().saturating_sub(buffer.capacity());
    let mut sampler: Option<ReplacementSampler> = None;
    for c in rest.into_iter().skip(skip) {
        let s = sampler.get_or_insert_with(|| ReplacementSampler::new(buffer, selector, current_task));
        if let Some(slot) = s.draw(buffer, rng) {
            buffer.overwrite(slot, c);
            written.push(slot);
        }
    }
    written
}

/// Reservoir-gated insertion of stream candidates (losses already cached on
/// the entries). With the reservoir selector the gate's own slot is used;
/// otherwise admitted candidates are placed by `selector`.
pub fn insert_candidates(
    buffer: &mut MemoryBuffer,
    candidates: Vec<BufferEntry>,
    selector: Selector,
    current_task: usize,
    rng: &mut impl Rng,
) {
    if selector == Selector::Reservoir {
        for c in candidates {
            buffer.reservoir_update(c, rng);
        }
        return;
    }
    let mut admitted = Vec::new();
    for c in candidates {
        match buffer.reservoir_admit(rng) {
            Admission::Append => buffer.push(c),
            Admission::Replace(_) => admitted.push(c),
            Admission::Reject => {}
        }
    }
    replace_with_candidates(buffer, admitted, selector, current_task, rng);
}

/// Class-balanced greedy insertion: a full buffer evicts a random entry of
/// its largest class (lowest id on ties) when the incoming class is below
/// its even share.
pub fn gdumb_update(buffer: &mut MemoryBuffer, item: BufferEntry, rng: &mut impl Rng) -> bool {
    buffer.n_seen += 1;
    if !buffer.is_full() {
        buffer.push(item);
        return true;
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for e in buffer.entries() {
        *counts.entry(e.label).or_default() += 1;
    }
    let classes = counts.len() + usize::from(!counts.contains_key(&item.label));
    let quota = buffer.capacity() / classes;
    if counts.get(&item.label).copied().unwrap_or(0) >= quota {
        return false;
    }
    let (&largest, _) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .expect("full buffer has classes");
    let members: Vec<usize> = (0..buffer.len())
        .filter(|&i| buffer.entries()[i].label == largest)
        .collect();
    let slot = members[rng.random_range(0..members.len())];
    buffer.overwrite(slot, item);
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: usize,
    pub count: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetric>,
    /// Frequency-weighted mean over classes.
    pub overall: f64,
}

fn by_stored_class(buffer: &MemoryBuffer) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in buffer.entries().iter().enumerate() {
        groups.entry(e.label).or_default().push(i);
    }
    groups
}

fn weighted(per_class: Vec<ClassMetric>) -> ClassReport {
    let total: usize = per_class.iter().map(|c| c.count).sum();
    let overall = if total == 0 {
        0.0
    } else {
        per_class
            .iter()
            .map(|c| c.value * c.count as f64)
            .sum::<f64>()
            / total as f64
    };
    ClassReport { per_class, overall }
}

/// Fraction of entries stored under each class whose true label matches.
pub fn purity(buffer: &MemoryBuffer) -> ClassReport {
    let entries = buffer.entries();
    let per_class = by_stored_class(buffer)
        .into_iter()
        .map(|(class, idx)| ClassMetric {
            class,
            count: idx.len(),
            value: idx.iter().filter(|&&i| entries[i].truth == class).count() as f64
                / idx.len() as f64,
        })
        .collect();
    weighted(per_class)
}

/// Mean per-coordinate standard deviation of `reference` embeddings within
/// each stored class.
pub fn diversity(buffer: &MemoryBuffer, reference: &ModelState) -> Result<ClassReport> {
    if buffer.is_empty() {
        return Ok(weighted(Vec::new()));
    }
    let emb = reference.embed(&buffer.features())?;
    let mut per_class = Vec::new();
    for (class, idx) in by_stored_class(buffer) {
        if idx.len() < 2 {
            log::warn!("diversity of class {class} undefined with {} entry", idx.len());
            per_class.push(ClassMetric {
                class,
                count: idx.len(),
                value: 0.0,
            });
            continue;
        }
        let n = idx.len() as f64;
        let d = emb.cols();
        let mut total = 0.0;
        for j in 0..d {
            let mean = idx.iter().map(|&i| emb.get(i, j)).sum::<f64>() / n;
            let var = idx.iter().map(|&i| (emb.get(i, j) - mean).powi(2)).sum::<f64>() / n;
            total += var.sqrt();
        }
        per_class.push(ClassMetric {
            class,
            count: idx.len(),
            value: total / d as f64,
        });
    }
    Ok(weighted(per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::tensor::Dense;

    fn entry(task: usize, label: usize, truth: usize, loss: f64) -> BufferEntry {
        BufferEntry {
            features: vec![label as f64, truth as f64],
            label,
            truth,
            task,
            loss,
            tick: 0,
        }
    }

    fn buffer_of(entries: Vec<BufferEntry>) -> MemoryBuffer {
        let mut b = MemoryBuffer::new(entries.len()).unwrap();
        for e in entries {
            b.push(e);
        }
        b
    }

    #[test]
    fn first_m_items_are_all_stored() {
        let mut b = MemoryBuffer::new(5).unwrap();
        let mut rng = seed::rng(0, &[]);
        for i in 0..5 {
            assert_eq!(b.reservoir_update(entry(0, i, i, 0.0), &mut rng), Some(i));
        }
        assert!(b.is_full());
        for i in 5..50 {
            b.reservoir_update(entry(0, i, i, 0.0), &mut rng);
            assert_eq!(b.len(), 5);
        }
        assert_eq!(b.n_seen(), 50);
    }

    #[test]
    fn second_item_resident_half_the_time() {
        let trials = 10_000;
        let mut hits = 0;
        for t in 0..trials {
            let mut rng = seed::rng(t, &[1]);
            let mut b = MemoryBuffer::new(1).unwrap();
            b.reservoir_update(entry(0, 0, 0, 0.0), &mut rng);
            b.reservoir_update(entry(0, 1, 1, 0.0), &mut rng);
            hits += usize::from(b.entries()[0].label == 1);
        }
        let f = hits as f64 / trials as f64;
        assert!((f - 0.5).abs() < 0.02, "{f}");
    }

    #[test]
    fn candidates_follow_percentile_cut() {
        assert_eq!(insertion_candidates(&[0.1, 0.2, 0.3, 0.4], 75.0), vec![0]);
        assert_eq!(insertion_candidates(&[0.4, 0.3, 0.2, 0.1], 0.0), vec![3, 2, 1, 0]);
        assert!(insertion_candidates(&[0.4, 0.3], 100.0).is_empty());
        let losses: Vec<f64> = (0..32).map(|i| ((i * 7) % 32) as f64).collect();
        assert_eq!(insertion_candidates(&losses, 75.0).len(), 8);
        // ties resolved by index
        assert_eq!(insertion_candidates(&[1.0, 1.0, 1.0, 1.0], 50.0), vec![0, 1]);
    }

    #[test]
    fn lass_normalisation() {
        let b = buffer_of(vec![entry(0, 0, 0, 1.0), entry(0, 1, 1, 3.0)]);
        let p = lass_scores(&b);
        assert!((p[0] - 0.25).abs() < 1e-9 && (p[1] - 0.75).abs() < 1e-9);
        let flat = buffer_of(vec![entry(0, 0, 0, 0.0), entry(0, 1, 1, 0.0), entry(0, 1, 1, 0.0)]);
        for q in lass_scores(&flat) {
            assert!((q - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn abs_reverses_past_scores() {
        let b = buffer_of(vec![entry(0, 0, 0, 0.1), entry(0, 1, 1, 2.0), entry(1, 2, 2, 0.5)]);
        let (cur, past) = abs_partition_probs(&b, 1);
        let cur = cur.unwrap();
        let past = past.unwrap();
        assert_eq!(cur[2], 1.0);
        let expected = 1.9 / (1.9 + SCORE_EPS);
        assert!((past[0] - expected).abs() < 1e-12);
        assert!(past[1] < 1e-8);
    }

    #[test]
    fn abs_single_partition_always_current() {
        let b = buffer_of((0..6).map(|i| entry(3, i % 2, i % 2, i as f64)).collect());
        let mut rng = seed::rng(1, &[]);
        for _ in 0..200 {
            let slot = abs_select(&b, 3, &mut rng).unwrap();
            assert_eq!(b.entries()[slot].task, 3);
        }
        // no current entries at all: falls back to the past partition
        assert!(abs_select(&b, 4, &mut rng).is_some());
    }

    #[test]
    fn full_buffer_single_candidate_changes_one_entry() {
        let mut b = buffer_of((0..10).map(|i| entry(0, 0, 0, i as f64)).collect());
        let before = b.clone();
        let mut rng = seed::rng(2, &[]);
        for sel in [Selector::Lass, Selector::Abs, Selector::Reservoir] {
            let mut b2 = before.clone();
            replace_with_candidates(&mut b2, vec![entry(1, 1, 1, 0.0)], sel, 1, &mut rng);
            let diff = b2
                .entries()
                .iter()
                .zip(before.entries())
                .filter(|(a, c)| a.label != c.label)
                .count();
            assert_eq!(diff, 1);
        }
        replace_with_candidates(&mut b, vec![], Selector::Abs, 1, &mut rng);
        assert_eq!(b, before);
    }

    #[test]
    fn empty_buffer_appends_candidates() {
        let mut b = MemoryBuffer::new(10).unwrap();
        let mut rng = seed::rng(2, &[]);
        let cands: Vec<_> = (0..8).map(|i| entry(0, i, i, 0.0)).collect();
        replace_with_candidates(&mut b, cands, Selector::Abs, 0, &mut rng);
        assert_eq!(b.len(), 8);
        assert_eq!(b.task_count(0), 8);
    }

    #[test]
    fn oversized_candidate_set_leaves_last_m() {
        let mut b = buffer_of((0..4).map(|_| entry(0, 0, 0, 1.0)).collect());
        let mut rng = seed::rng(5, &[]);
        let cands: Vec<_> = (0..10).map(|i| entry(1, 1, i, 0.0)).collect();
        replace_with_candidates(&mut b, cands, Selector::Lass, 1, &mut rng);
        assert_eq!(b.len(), 4);
        let mut resident: Vec<usize> = b.entries().iter().map(|e| e.truth).collect();
        resident.sort_unstable();
        assert_eq!(resident, vec![6, 7, 8, 9]);
    }

    #[test]
    fn gdumb_balances_classes() {
        let mut b = MemoryBuffer::new(20).unwrap();
        let mut rng = seed::rng(9, &[]);
        for i in 0..200 {
            let y = if i < 100 { i % 2 } else { 2 + i % 3 };
            gdumb_update(&mut b, entry(0, y, y, 0.0), &mut rng);
        }
        let mut counts = BTreeMap::new();
        for e in b.entries() {
            *counts.entry(e.label).or_insert(0usize) += 1;
        }
        let max = counts.values().max().unwrap();
        let min = counts.values().min().unwrap();
        assert_eq!(counts.len(), 5);
        assert!(max - min <= 1, "{counts:?}");
    }

    #[test]
    fn purity_counts_mislabels() {
        let clean = buffer_of(vec![entry(0, 0, 0, 0.0), entry(0, 1, 1, 0.0)]);
        assert_eq!(purity(&clean).overall, 1.0);
        let b = buffer_of(vec![
            entry(0, 0, 0, 0.0),
            entry(0, 0, 0, 0.0),
            entry(0, 1, 1, 0.0),
            entry(0, 1, 0, 0.0),
        ]);
        let p = purity(&b);
        assert_eq!(p.overall, 0.75);
        assert_eq!(p.per_class[1].value, 0.5);
    }

    fn identity_model() -> ModelState {
        // one hidden layer of width 2 computing ReLU(x), so embeddings equal
        // the (non-negative) features
        let eye = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        ModelState::from_layers(
            vec![
                Dense {
                    weights: eye.clone(),
                    bias: vec![0.0; 2],
                },
                Dense {
                    weights: eye,
                    bias: vec![0.0; 2],
                },
            ],
            0.1,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn diversity_matches_hand_std() {
        let m = identity_model();
        let dup = buffer_of(vec![entry(0, 0, 0, 0.0), entry(0, 0, 0, 0.0)]);
        assert_eq!(diversity(&dup, &m).unwrap().overall, 0.0);

        let mut a = entry(0, 0, 0, 0.0);
        a.features = vec![1.0, 2.0];
        let mut b = entry(0, 0, 0, 0.0);
        b.features = vec![3.0, 6.0];
        // population std per coordinate: 1 and 2, mean 1.5
        let two = buffer_of(vec![a, b]);
        assert!((diversity(&two, &m).unwrap().overall - 1.5).abs() < 1e-12);
    }

    #[test]
    fn partition_counts_stay_exact() {
        let mut b = MemoryBuffer::new(3).unwrap();
        b.push(entry(0, 0, 0, 0.0));
        b.push(entry(0, 0, 0, 0.0));
        b.push(entry(1, 2, 2, 0.0));
        b.overwrite(0, entry(1, 3, 3, 0.0));
        assert_eq!(b.task_count(0), 1);
        assert_eq!(b.task_count(1), 2);
        b.remove(1);
        assert_eq!(b.task_count(0), 0);
        assert_eq!(b.task_counts().values().sum::<usize>(), b.len());
    }

    #[test]
    fn jsonl_round_trip() {
        let b = buffer_of(vec![entry(0, 0, 1, 0.25), entry(1, 2, 2, 1.5)]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("buf.jsonl");
        b.dump_jsonl(&p).unwrap();
        let back = MemoryBuffer::load_jsonl(&p, 2).unwrap();
        assert_eq!(back.entries()[0].truth, 1);
        assert_eq!(back.entries()[1].loss, 1.5);
    }
}
