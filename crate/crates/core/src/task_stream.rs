//! Class-incremental streams and the rehearsal exemplar memory.
//!
//! Classes are relabelled by their position in the [`ClassOrder`], so the
//! classes seen up to session `t` are always the contiguous label range
//! `0..seen`. Every [`SessionData`] speaks in these positional labels; the
//! original dataset ids only appear in [`ClassOrder::permutation`].

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LabeledSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassOrder {
    /// `permutation[p]` is the dataset class id presented at position `p`.
    pub permutation: Vec<usize>,
    /// `None` is the canonical (identity) order.
    pub seed: Option<u64>,
}

impl ClassOrder {
    /// Inverse map: dataset class id → position.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.permutation.len()];
        for (p, &c) in self.permutation.iter().enumerate() {
            pos[c] = p;
        }
        pos
    }
}

pub fn build_class_order(num_classes: usize, seed: Option<u64>) -> Result<ClassOrder> {
    if num_classes < 2 {
        return Err(Error::InvalidProtocol(format!(
            "need at least 2 classes, got {num_classes}"
        )));
    }
    let mut permutation: Vec<usize> = (0..num_classes).collect();
    if let Some(s) = seed {
        permutation.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
    }
    Ok(ClassOrder { permutation, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// No base session: every session adds `classes_per_step` classes.
    B0,
    /// A larger first session of `base_classes`, then fixed steps.
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    FixedTotal,
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Herding,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Protocol {
    pub kind: ProtocolKind,
    pub base_classes: usize,
    pub classes_per_step: usize,
    pub memory_policy: MemoryPolicy,
    pub memory_budget: usize,
}

impl Protocol {
    pub fn b0(classes_per_step: usize, memory_policy: MemoryPolicy, memory_budget: usize) -> Self {
        Protocol {
            kind: ProtocolKind::B0,
            base_classes: 0,
            classes_per_step,
            memory_policy,
            memory_budget,
        }
    }

    pub fn with_base(
        base_classes: usize,
        classes_per_step: usize,
        memory_policy: MemoryPolicy,
        memory_budget: usize,
    ) -> Self {
        Protocol {
            kind: ProtocolKind::Base,
            base_classes,
            classes_per_step,
            memory_policy,
            memory_budget,
        }
    }

    /// Session sizes for a dataset with `num_classes` classes.
    pub fn session_sizes(&self, num_classes: usize) -> Result<Vec<usize>> {
        let bad = |m: String| Err(Error::InvalidProtocol(m));
        if num_classes < 2 {
            return bad(format!("need at least 2 classes, got {num_classes}"));
        }
        if self.classes_per_step == 0 {
            return bad("classes_per_step must be ≥ 1".into());
        }
        if self.memory_budget == 0 {
            return bad("memory_budget must be > 0".into());
        }
        match self.kind {
            ProtocolKind::B0 if self.base_classes != 0 => return bad("B0 protocol must have base_classes = 0".into()),
            ProtocolKind::Base if self.base_classes == 0 => return bad("base protocol needs base_classes ≥ 1".into()),
            _ => {}
        }
        if self.base_classes >= num_classes {
            return bad(format!(
                "base of {} leaves no incremental classes out of {num_classes}",
                self.base_classes
            ));
        }
        let rest = num_classes - self.base_classes;
        if rest % self.classes_per_step != 0 {
            return bad(format!(
                "{rest} incremental classes are not a multiple of {} per step",
                self.classes_per_step
            ));
        }
        let steps = rest / self.classes_per_step;
        let mut sizes = Vec::with_capacity(steps + 1);
        if self.base_classes > 0 {
            sizes.push(self.base_classes);
        }
        sizes.extend(std::iter::repeat_n(self.classes_per_step, steps));
        Ok(sizes)
    }
}

/// Ordered class-incremental sessions over one dataset.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub dataset: Arc<Dataset>,
    pub protocol: Protocol,
    pub order: ClassOrder,
    /// Positional label ranges `[start, end)` per session.
    bounds: Vec<(usize, usize)>,
    /// Dataset class id → positional label.
    position: Vec<usize>,
}

pub fn build_stream(dataset: Arc<Dataset>, protocol: Protocol, order: ClassOrder) -> Result<TaskStream> {
    if order.permutation.len() != dataset.num_classes {
        return Err(Error::InvalidProtocol(format!(
            "class order covers {} classes, dataset has {}",
            order.permutation.len(),
            dataset.num_classes
        )));
    }
    let mut check = order.permutation.clone();
    check.sort_unstable();
    if check.iter().enumerate().any(|(i, &c)| i != c) {
        return Err(Error::InvalidProtocol("class order is not a permutation".into()));
    }
    let sizes = protocol.session_sizes(dataset.num_classes)?;
    let mut bounds = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        bounds.push((start, start + s));
        start += s;
    }
    let position = order.positions();
    Ok(TaskStream {
        dataset,
        protocol,
        order,
        bounds,
        position,
    })
}

impl TaskStream {
    pub fn num_sessions(&self) -> usize {
        self.bounds.len()
    }

    pub fn session_bounds(&self, t: usize) -> (usize, usize) {
        self.bounds[t]
    }

    /// Dataset class ids introduced at session `t`.
    pub fn session_classes(&self, t: usize) -> Vec<usize> {
        let (s, e) = self.bounds[t];
        self.order.permutation[s..e].to_vec()
    }

    pub fn label_of(&self, class_id: usize) -> usize {
        self.position[class_id]
    }

    fn relabel(&self, rows: &[usize], set: &LabeledSet) -> LabeledSet {
        let mut out = set.select(rows);
        for y in &mut out.y {
            *y = self.position[*y];
        }
        out
    }

    /// Materializes session `t` with the given rehearsal memory.
    pub fn session(&self, t: usize, memory: &ExemplarMemory) -> Result<SessionData> {
        if t >= self.num_sessions() {
            return Err(Error::InvalidArgument(format!(
                "session {t} out of range (stream has {})",
                self.num_sessions()
            )));
        }
        let (start, end) = self.bounds[t];
        let train = &self.dataset.train;
        let new_indices: Vec<usize> = (0..train.len())
            .filter(|&i| {
                let p = self.position[train.y[i]];
                (start..end).contains(&p)
            })
            .collect();
        let mut mem_indices = Vec::with_capacity(memory.len());
        for (&label, idx) in &memory.per_class {
            if label >= start {
                return Err(Error::Protocol(format!(
                    "memory holds class {label} which is not an old class at session {t}"
                )));
            }
            for &i in idx {
                if self.position[train.y[i]] != label {
                    return Err(Error::Protocol(format!(
                        "memory entry {i} is filed under class {label} but belongs to another class"
                    )));
                }
            }
            mem_indices.extend_from_slice(idx);
        }
        let new_train = self.relabel(&new_indices, train);
        let mem = self.relabel(&mem_indices, train);
        let combined = new_train.concat(&mem);
        let test = &self.dataset.test;
        let test_rows: Vec<usize> = (0..test.len()).filter(|&i| self.position[test.y[i]] < end).collect();
        let test_all_seen = self.relabel(&test_rows, test);
        let mut class_counts = BTreeMap::new();
        for &y in &combined.y {
            *class_counts.entry(y).or_insert(0) += 1;
        }
        Ok(SessionData {
            t,
            num_old: start,
            num_new: end - start,
            new_indices,
            new_train,
            memory: mem,
            combined,
            test_all_seen,
            class_counts,
        })
    }
}

/// One session's training and evaluation material. Labels are positional.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub t: usize,
    pub num_old: usize,
    pub num_new: usize,
    /// Row indices of `new_train` in the dataset's training split.
    pub new_indices: Vec<usize>,
    pub new_train: LabeledSet,
    pub memory: LabeledSet,
    pub combined: LabeledSet,
    pub test_all_seen: LabeledSet,
    pub class_counts: BTreeMap<usize, usize>,
}

impl SessionData {
    pub fn num_seen(&self) -> usize {
        self.num_old + self.num_new
    }
}

/// Budgeted store of old-class training instances, kept in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    pub policy: MemoryPolicy,
    pub budget: usize,
    pub strategy: SelectionStrategy,
    /// Positional label → dataset training-row indices, most representative first.
    pub per_class: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarMemory {
    pub fn new(policy: MemoryPolicy, budget: usize, strategy: SelectionStrategy) -> Self {
        ExemplarMemory {
            policy,
            budget,
            strategy,
            per_class: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-class allowance once `num_seen` classes are stored.
    pub fn quota(&self, label: usize, num_seen: usize) -> usize {
        match self.policy {
            MemoryPolicy::PerClass => self.budget,
            MemoryPolicy::FixedTotal => {
                let base = self.budget / num_seen;
                base + usize::from(label < self.budget % num_seen)
            }
        }
    }

    /// Adds the classes of `session` using `features` (one row per
    /// `session.new_train` instance, from the current model) and trims old
    /// classes to their new quota by keeping a prefix of their selection order.
    pub fn update(&self, session: &SessionData, features: ArrayView2<'_, f64>, seed: u64) -> Result<ExemplarMemory> {
        if features.nrows() != session.new_train.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} new instances",
                features.nrows(),
                session.new_train.len()
            )));
        }
        let seen = session.num_seen();
        let mut next = ExemplarMemory::new(self.policy, self.budget, self.strategy);
        for (&label, idx) in &self.per_class {
            let q = self.quota(label, seen);
            next.per_class.insert(label, idx[..q.min(idx.len())].to_vec());
        }
        for label in session.num_old..seen {
            let rows: Vec<usize> = (0..session.new_train.len())
                .filter(|&i| session.new_train.y[i] == label)
                .collect();
            if rows.is_empty() {
                return Err(Error::MissingData(format!("no training instances for class {label}")));
            }
            let m = self.quota(label, seen).min(rows.len());
            let chosen = match self.strategy {
                SelectionStrategy::Herding => {
                    let mut f = features.select(Axis(0), &rows);
                    l2_normalize_rows(&mut f);
                    herding_select(f.view(), m)?
                }
                SelectionStrategy::Random => {
                    let mut order: Vec<usize> = (0..rows.len()).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    order.shuffle(&mut rng);
                    order.truncate(m);
                    order
                }
            };
            next.per_class.insert(
                label,
                chosen.into_iter().map(|i| session.new_indices[rows[i]]).collect(),
            );
        }
        Ok(next)
    }
}

pub fn l2_normalize_rows(x: &mut ndarray::Array2<f64>) {
    for mut row in x.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
}

/// Greedy mean matching: at step `k`, picks the unselected vector that brings
/// the mean of the `k` selected vectors closest (Euclidean) to the mean of all
/// vectors. Ties go to the lowest index. Returns indices in selection order.
pub fn herding_select(vectors: ArrayView2<'_, f64>, m: usize) -> Result<Vec<usize>> {
    let n = vectors.nrows();
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot select {m} of {n} vectors")));
    }
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("herding input has non-finite values".into()));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let target: Array1<f64> = vectors.mean_axis(Axis(0)).expect("n ≥ 1");
    let mut running = Array1::<f64>::zeros(vectors.ncols());
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(m);
    for k in 1..=m {
        let kf = k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in vectors.rows().into_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d: f64 = target
                .iter()
                .zip(running.iter().zip(v.iter()))
                .map(|(mu, (s, x))| {
                    let diff = mu - (s + x) / kf;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("unselected vector remains");
        taken[i] = true;
        running += &vectors.row(i);
        out.push(i);
    }
    Ok(out)
}
