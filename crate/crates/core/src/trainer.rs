//! Parallel negative-sampling SGD over a partition plan.
//!
//! Each worker owns a disjoint set of partitions (largest first, dealt
//! round-robin) and applies sparse row updates to one shared table without
//! locks. Concurrent read-modify-write on the same row may lose an update;
//! that is tolerated, and the single-worker path is bit-deterministic.
//!
//! An epoch is one pass over every training triple whatever the plan, so
//! random and semantic plans see the same data volume.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ingest;
use crate::models::{self, Dtype, EmbeddingTable, ModelKind, Norm};
use crate::partition::PartitionPlan;
use crate::rng::{self, Rng};
use crate::store::{EntityId, Triple, TripleStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    AdaGrad { eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    /// `sum_neg max(0, margin + s(neg) - s(pos))`
    MarginRanking,
    /// `softplus(-s(pos)) + sum_neg softplus(s(neg))`
    Logistic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeScope {
    #[default]
    Global,
    /// Replacements drawn from the entities of the triple's own partition.
    Local,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub dim: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub loss: Loss,
    /// Margin of the ranking loss (separate from the TransE score offset).
    pub margin: f64,
    pub workers: usize,
    pub seed: u64,
    pub regularization: f64,
    pub negative_scope: NegativeScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_model(ModelKind::TransE { norm: Norm::L2, margin: 12.0 })
    }
}

impl TrainConfig {
    /// Defaults for a model: margin ranking for TransE, logistic loss for
    /// the bilinear models.
    pub fn for_model(model: ModelKind) -> Self {
        let loss = match model {
            ModelKind::TransE { .. } => Loss::MarginRanking,
            _ => Loss::Logistic,
        };
        TrainConfig {
            model,
            dim: 100,
            epochs: 10,
            max_steps: None,
            batch_size: 256,
            negatives: 16,
            learning_rate: 0.1,
            optimizer: Optimizer::AdaGrad { eps: 1e-10 },
            loss,
            margin: 1.0,
            workers: 1,
            seed: 0,
            regularization: 0.0,
            negative_scope: NegativeScope::Global,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.negatives == 0 {
            return bad("neg must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.learning_rate));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.regularization.is_nan() || self.regularization < 0.0 {
            return bad(format!("reg must be non-negative, got {}", self.regularization));
        }
        if let Optimizer::AdaGrad { eps } = self.optimizer {
            if eps.is_nan() || eps < 0.0 {
                return bad(format!("adagrad_eps must be non-negative, got {eps}"));
            }
        }
        Ok(())
    }

    /// Applies one `key=value` setting. Recognised keys: `model`, `norm`,
    /// `gamma`, `dim`, `epochs`, `max_steps`, `batch_size`, `neg`, `lr`,
    /// `optimizer`, `adagrad_eps`, `loss`, `margin`, `workers`, `seed`,
    /// `reg`, `neg_scope`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {v:?}")))
        }
        let value = value.trim();
        match key.trim() {
            "model" => {
                self.model = match value.to_ascii_lowercase().as_str() {
                    "transe" => match self.model {
                        m @ ModelKind::TransE { .. } => m,
                        _ => ModelKind::TransE { norm: Norm::L2, margin: 12.0 },
                    },
                    "distmult" => ModelKind::DistMult,
                    "complex" => ModelKind::ComplEx,
                    other => return Err(Error::InvalidConfig(format!("unknown model {other:?}"))),
                }
            }
            "norm" => match &mut self.model {
                ModelKind::TransE { norm, .. } => *norm = value.parse()?,
                _ => return Err(Error::InvalidConfig("norm applies to transe only".into())),
            },
            "gamma" => match &mut self.model {
                ModelKind::TransE { margin, .. } => *margin = num(key, value)?,
                _ => return Err(Error::InvalidConfig("gamma applies to transe only".into())),
            },
            "dim" => self.dim = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => {
                self.max_steps = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "batch_size" => self.batch_size = num(key, value)?,
            "neg" => self.negatives = num(key, value)?,
            "lr" => self.learning_rate = num(key, value)?,
            "optimizer" => {
                self.optimizer = match value.to_ascii_lowercase().as_str() {
                    "sgd" => Optimizer::Sgd,
                    "adagrad" => match self.optimizer {
                        o @ Optimizer::AdaGrad { .. } => o,
                        Optimizer::Sgd => Optimizer::AdaGrad { eps: 1e-10 },
                    },
                    other => return Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
                }
            }
            "adagrad_eps" => match &mut self.optimizer {
                Optimizer::AdaGrad { eps } => *eps = num(key, value)?,
                Optimizer::Sgd => return Err(Error::InvalidConfig("adagrad_eps requires optimizer=adagrad".into())),
            },
            "loss" => {
                self.loss = match value.to_ascii_lowercase().as_str() {
                    "margin" | "margin-ranking" => Loss::MarginRanking,
                    "logistic" => Loss::Logistic,
                    other => return Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
                }
            }
            "margin" => self.margin = num(key, value)?,
            "workers" => self.workers = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "reg" => self.regularization = num(key, value)?,
            "neg_scope" => {
                self.negative_scope = match value.to_ascii_lowercase().as_str() {
                    "global" => NegativeScope::Global,
                    "local" | "partition-local" => NegativeScope::Local,
                    other => return Err(Error::InvalidConfig(format!("unknown neg_scope {other:?}"))),
                }
            }
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; `#` starts a comment. `model` and
    /// then `optimizer` lines are applied first so that variant-specific
    /// keys land on the right variant.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", n + 1)))?;
            entries.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        entries.sort_by_key(|(k, _)| match k.as_str() {
            "model" => 0,
            "optimizer" => 1,
            _ => 2,
        });
        for (k, v) in entries {
            if k == "model" {
                let loss_default = TrainConfig::for_model(self.model).loss;
                self.set(&k, &v)?;
                if self.loss == loss_default {
                    self.loss = TrainConfig::for_model(self.model).loss;
                }
            } else {
                self.set(&k, &v)?;
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Inverse of [`TrainConfig::from_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "model={}", self.model.name());
        if let ModelKind::TransE { norm, margin } = self.model {
            let _ = writeln!(s, "norm={}", if norm == Norm::L1 { "l1" } else { "l2" });
            let _ = writeln!(s, "gamma={margin}");
        }
        let _ = writeln!(s, "dim={}", self.dim);
        let _ = writeln!(s, "epochs={}", self.epochs);
        if let Some(m) = self.max_steps {
            let _ = writeln!(s, "max_steps={m}");
        }
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "neg={}", self.negatives);
        let _ = writeln!(s, "lr={}", self.learning_rate);
        match self.optimizer {
            Optimizer::Sgd => {
                let _ = writeln!(s, "optimizer=sgd");
            }
            Optimizer::AdaGrad { eps } => {
                let _ = writeln!(s, "optimizer=adagrad\nadagrad_eps={eps}");
            }
        }
        let _ = writeln!(s, "loss={}", if self.loss == Loss::Logistic { "logistic" } else { "margin" });
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "workers={}", self.workers);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "reg={}", self.regularization);
        let _ = writeln!(s, "neg_scope={}", if self.negative_scope == NegativeScope::Local { "local" } else { "global" });
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Head,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NegativeSample {
    pub base: Triple,
    pub corrupted_slot: Slot,
    pub replacement: EntityId,
}

impl NegativeSample {
    pub fn triple(&self) -> Triple {
        match self.corrupted_slot {
            Slot::Head => Triple { head: self.replacement, ..self.base },
            Slot::Tail => Triple { tail: self.replacement, ..self.base },
        }
    }
}

/// Entities a replacement may be drawn from.
#[derive(Clone, Copy, Debug)]
pub enum SamplingScope<'a> {
    /// Entity ids `0..n`.
    Global(usize),
    /// A sorted, duplicate-free entity roster.
    Local(&'a [EntityId]),
}

impl SamplingScope<'_> {
    fn len(&self) -> usize {
        match self {
            SamplingScope::Global(n) => *n,
            SamplingScope::Local(r) => r.len(),
        }
    }

    fn get(&self, i: usize) -> EntityId {
        match self {
            SamplingScope::Global(_) => i as EntityId,
            SamplingScope::Local(r) => r[i],
        }
    }

    fn position(&self, e: EntityId) -> Option<usize> {
        match self {
            SamplingScope::Global(n) => ((e as usize) < *n).then_some(e as usize),
            SamplingScope::Local(r) => r.binary_search(&e).ok(),
        }
    }
}

const MAX_REDRAWS: usize = 100;

/// Draws `k` corruptions of `t`. The slot is a fair coin; the replacement is
/// uniform over the scope minus the original entity, found by redrawing on
/// collision and, after 100 collisions, by drawing from the scope with the
/// original's position skipped.
pub fn sample_negatives(t: Triple, k: usize, scope: SamplingScope<'_>, rng: &mut Rng) -> Result<Vec<NegativeSample>> {
    let n = scope.len();
    if n < 2 {
        return Err(Error::DegenerateScope(n));
    }
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let slot = if rng::below(rng, 2) == 0 { Slot::Head } else { Slot::Tail };
        let original = match slot {
            Slot::Head => t.head,
            Slot::Tail => t.tail,
        };
        let mut replacement = None;
        for _ in 0..MAX_REDRAWS {
            let e = scope.get(rng::below(rng, n as u64) as usize);
            if e != original {
                replacement = Some(e);
                break;
            }
        }
        let replacement = replacement.unwrap_or_else(|| match scope.position(original) {
            Some(pos) => {
                let j = rng::below(rng, n as u64 - 1) as usize;
                scope.get(if j >= pos { j + 1 } else { j })
            }
            None => scope.get(rng::below(rng, n as u64) as usize),
        });
        out.push(NegativeSample { base: t, corrupted_slot: slot, replacement });
    }
    Ok(out)
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss of one positive against its negatives, with the derivative of the
/// loss with respect to each score written to `d_pos` and `d_neg`.
pub fn loss_and_slopes(loss: Loss, margin: f64, s_pos: f64, s_neg: &[f64], d_neg: &mut [f64]) -> (f64, f64) {
    match loss {
        Loss::MarginRanking => {
            let (mut total, mut d_pos) = (0.0, 0.0);
            for (s, d) in s_neg.iter().zip(d_neg.iter_mut()) {
                let m = margin + s - s_pos;
                if m > 0.0 {
                    total += m;
                    d_pos -= 1.0;
                    *d = 1.0;
                } else {
                    *d = 0.0;
                }
            }
            (total, d_pos)
        }
        Loss::Logistic => {
            let mut total = softplus(-s_pos);
            let d_pos = -sigmoid(-s_pos);
            for (s, d) in s_neg.iter().zip(d_neg.iter_mut()) {
                total += softplus(*s);
                *d = sigmoid(*s);
            }
            (total, d_pos)
        }
    }
}

/// `f64` storage shared between workers. Loads and stores are individually
/// atomic (relaxed); read-modify-write sequences are not.
struct SharedMatrix {
    cells: Vec<AtomicU64>,
}

impl SharedMatrix {
    fn from_slice(values: &[f64]) -> Self {
        SharedMatrix { cells: values.iter().map(|v| AtomicU64::new(v.to_bits())).collect() }
    }

    fn zeros(len: usize) -> Self {
        SharedMatrix { cells: (0..len).map(|_| AtomicU64::new(0)).collect() }
    }

    #[inline]
    fn load(&self, i: usize) -> f64 {
        f64::from_bits(self.cells[i].load(Ordering::Relaxed))
    }

    #[inline]
    fn store(&self, i: usize, v: f64) {
        self.cells[i].store(v.to_bits(), Ordering::Relaxed)
    }

    fn read_row(&self, row: usize, width: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.load(row * width + j);
        }
    }

    fn to_vec(&self) -> Vec<f64> {
        (0..self.cells.len()).map(|i| self.load(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum RowKey {
    Entity(u32),
    Relation(u32),
}

/// Gradient accumulator over the rows touched by one batch, in first-touch
/// order.
#[derive(Default)]
struct BatchGrads {
    index: HashMap<RowKey, usize>,
    keys: Vec<RowKey>,
    grads: Vec<f64>,
    values: Vec<f64>,
}

impl BatchGrads {
    fn clear(&mut self) {
        self.index.clear();
        self.keys.clear();
        self.grads.clear();
        self.values.clear();
    }

    fn slot(&mut self, key: RowKey, width: usize, row: &[f64]) -> usize {
        *self.index.entry(key).or_insert_with(|| {
            self.keys.push(key);
            self.grads.extend(std::iter::repeat_n(0.0, width));
            self.values.extend_from_slice(row);
            self.keys.len() - 1
        })
    }

    fn add(&mut self, key: RowKey, width: usize, row: &[f64], scale: f64, g: &[f64]) {
        let s = self.slot(key, width, row);
        for (a, b) in self.grads[s * width..(s + 1) * width].iter_mut().zip(g) {
            *a += scale * b;
        }
    }
}

struct Shared {
    entities: SharedMatrix,
    relations: SharedMatrix,
    ada_entities: Option<SharedMatrix>,
    ada_relations: Option<SharedMatrix>,
}

impl Shared {
    fn matrix(&self, key: RowKey) -> (&SharedMatrix, Option<&SharedMatrix>, usize) {
        match key {
            RowKey::Entity(i) => (&self.entities, self.ada_entities.as_ref(), i as usize),
            RowKey::Relation(i) => (&self.relations, self.ada_relations.as_ref(), i as usize),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
    pub mean_sq_entity_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WorkerState {
    partitions: Vec<u32>,
    rng: Rng,
    /// Batches finished in the current epoch.
    cursor: usize,
    /// Summed loss and positive count of those batches.
    loss: f64,
    positives: u64,
}

/// Random stream for worker `w`'s negative samples.
pub fn worker_rng(seed: u64, worker: usize) -> Rng {
    rng::derived(seed, 2 * worker as u64 + 1)
}

/// Random stream that shuffles worker `w`'s triples in `epoch`.
pub fn epoch_order_rng(seed: u64, epoch: usize, worker: usize) -> Rng {
    rng::derived(rng::splitmix64(seed ^ 0xE90C), ((epoch as u64) << 20) ^ worker as u64)
}

/// Deals partitions to workers: sorted by size descending (ties by id),
/// partition `i` of that order goes to worker `i mod W`.
pub fn assign_partitions(plan: &PartitionPlan, workers: usize) -> Result<Vec<Vec<u32>>> {
    let k = plan.num_partitions();
    if workers > k {
        return Err(Error::TooManyWorkers { workers, partitions: k });
    }
    let mut order: Vec<&crate::partition::PartitionMeta> = plan.partitions.iter().collect();
    order.sort_by_key(|m| (std::cmp::Reverse(m.size), m.id));
    let mut out = vec![Vec::new(); workers];
    for (i, m) in order.iter().enumerate() {
        out[i % workers].push(m.id);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointState {
    config: TrainConfig,
    num_entities: usize,
    num_relations: usize,
    epoch: usize,
    step: u64,
    epoch_wall_ms: u64,
    log: TrainLog,
    workers: Vec<WorkerState>,
}

pub const STATE_FILE: &str = "state.json";
const ADA_ENTITIES: &str = "adagrad_entities.bin";
const ADA_RELATIONS: &str = "adagrad_relations.bin";

struct WorkerOutcome {
    finished: bool,
}

/// Training state over one store and plan.
pub struct Trainer<'a> {
    store: &'a TripleStore,
    cfg: TrainConfig,
    dtype: Dtype,
    width: usize,
    shared: Shared,
    members: Vec<Vec<usize>>,
    rosters: Vec<Vec<EntityId>>,
    workers: Vec<WorkerState>,
    epoch: usize,
    step: u64,
    epoch_wall_ms: u64,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    /// Starts from a freshly initialised table seeded with `cfg.seed`.
    pub fn new(store: &'a TripleStore, plan: &PartitionPlan, cfg: TrainConfig) -> Result<Self> {
        let table = models::init_table(&cfg.model, store.num_entities(), store.num_relations(), cfg.dim, cfg.seed)?;
        Self::with_table(store, plan, cfg, table)
    }

    pub fn with_table(store: &'a TripleStore, plan: &PartitionPlan, cfg: TrainConfig, table: EmbeddingTable) -> Result<Self> {
        cfg.validate()?;
        plan.validate(store.train().len())?;
        if table.dtype() != cfg.model.dtype() {
            return Err(Error::DtypeMismatch {
                model: cfg.model.name(),
                expected: if cfg.model.dtype() == Dtype::Complex { "complex" } else { "real" },
                found: if table.dtype() == Dtype::Complex { "complex" } else { "real" },
            });
        }
        if table.dim() != cfg.dim {
            return Err(Error::DimMismatch { expected: cfg.dim, found: table.dim() });
        }
        if table.num_entities() != store.num_entities() || table.num_relations() != store.num_relations() {
            return Err(Error::InvalidConfig("table rows do not match the store's dictionaries".into()));
        }
        let assignment = assign_partitions(plan, cfg.workers)?;
        let workers = assignment
            .into_iter()
            .enumerate()
            .map(|(w, partitions)| WorkerState { partitions, rng: worker_rng(cfg.seed, w), cursor: 0, loss: 0.0, positives: 0 })
            .collect();
        let adagrad = matches!(cfg.optimizer, Optimizer::AdaGrad { .. });
        let shared = Shared {
            entities: SharedMatrix::from_slice(table.entity_matrix()),
            relations: SharedMatrix::from_slice(table.relation_matrix()),
            ada_entities: adagrad.then(|| SharedMatrix::zeros(table.entity_matrix().len())),
            ada_relations: adagrad.then(|| SharedMatrix::zeros(table.relation_matrix().len())),
        };
        let members = plan.members();
        let train = store.train();
        let rosters = members
            .iter()
            .map(|m| {
                let mut r: Vec<EntityId> = m.iter().flat_map(|&i| [train[i].head, train[i].tail]).collect();
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        Ok(Trainer {
            store,
            dtype: table.dtype(),
            width: table.width(),
            cfg,
            shared,
            members,
            rosters,
            workers,
            epoch: 0,
            step: 0,
            epoch_wall_ms: 0,
            log: TrainLog::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn table(&self) -> EmbeddingTable {
        EmbeddingTable::from_parts(self.dtype, self.cfg.dim, self.shared.entities.to_vec(), self.shared.relations.to_vec())
            .expect("shape fixed at construction")
    }

    /// Changes the epoch target, e.g. to extend a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.cfg.epochs = epochs;
    }

    pub fn set_max_steps(&mut self, max_steps: Option<u64>) {
        self.cfg.max_steps = max_steps;
    }

    fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Trains until `cfg.epochs` epochs or `cfg.max_steps` batches are done.
    pub fn run(&mut self, exec: Execution) -> Result<()> {
        while !self.finished() {
            self.run_segment(exec)?;
        }
        Ok(())
    }

    /// Runs the current epoch until it completes or the step budget runs
    /// out.
    fn run_segment(&mut self, exec: Execution) -> Result<()> {
        let started = Instant::now();
        let steps = AtomicU64::new(self.step);
        let abort = AtomicBool::new(false);
        let failure: Mutex<Option<u64>> = Mutex::new(None);
        let epoch = self.epoch;
        let states = std::mem::take(&mut self.workers);
        let cells: Vec<Mutex<WorkerState>> = states.into_iter().map(Mutex::new).collect();
        let this = &*self;
        let outcomes = exec.map(cells.len(), |w| {
            let mut state = cells[w].lock().unwrap();
            this.run_worker(w, epoch, &mut state, &steps, &abort, &failure)
        });
        self.workers = cells.into_iter().map(|c| c.into_inner().unwrap()).collect();
        self.step = steps.into_inner();
        if let Some(step) = failure.into_inner().unwrap() {
            return Err(Error::DivergedAt(step));
        }
        self.epoch_wall_ms += started.elapsed().as_millis() as u64;
        if outcomes.iter().all(|o| o.finished) {
            let table = self.table();
            if !table.is_finite() {
                return Err(Error::NonFinite);
            }
            let loss: f64 = self.workers.iter().map(|w| w.loss).sum();
            let positives: u64 = self.workers.iter().map(|w| w.positives).sum();
            let mean_loss = if positives > 0 { loss / positives as f64 } else { 0.0 };
            self.log.epochs.push(EpochLog {
                epoch: self.epoch,
                mean_loss,
                wall_ms: self.epoch_wall_ms,
                mean_sq_entity_norm: table.mean_sq_entity_norm(),
            });
            self.epoch += 1;
            self.epoch_wall_ms = 0;
            for w in &mut self.workers {
                w.cursor = 0;
                w.loss = 0.0;
                w.positives = 0;
            }
        }
        Ok(())
    }

    /// Worker `w`'s training indices for `epoch`, in visiting order.
    fn worker_order(&self, w: usize, partitions: &[u32], epoch: usize) -> Vec<(usize, u32)> {
        let mut order: Vec<(usize, u32)> =
            partitions.iter().flat_map(|&p| self.members[p as usize].iter().map(move |&i| (i, p))).collect();
        rng::shuffle(&mut epoch_order_rng(self.cfg.seed, epoch, w), &mut order);
        order
    }

    fn run_worker(
        &self,
        w: usize,
        epoch: usize,
        state: &mut WorkerState,
        steps: &AtomicU64,
        abort: &AtomicBool,
        failure: &Mutex<Option<u64>>,
    ) -> WorkerOutcome {
        let order = self.worker_order(w, &state.partitions, epoch);
        let mut scratch = Scratch::new(self.width, self.cfg.negatives);
        let batches: Vec<&[(usize, u32)]> = order.chunks(self.cfg.batch_size).collect();
        while state.cursor < batches.len() {
            if abort.load(Ordering::Relaxed) {
                return WorkerOutcome { finished: false };
            }
            let step = steps.fetch_add(1, Ordering::Relaxed);
            if self.cfg.max_steps.is_some_and(|m| step >= m) {
                steps.fetch_sub(1, Ordering::Relaxed);
                return WorkerOutcome { finished: false };
            }
            let batch = batches[state.cursor];
            let batch_loss = self.train_batch(batch, &mut state.rng, &mut scratch);
            if !batch_loss.is_finite() {
                abort.store(true, Ordering::Relaxed);
                failure.lock().unwrap().get_or_insert(step);
                return WorkerOutcome { finished: false };
            }
            state.loss += batch_loss;
            state.positives += batch.len() as u64;
            state.cursor += 1;
        }
        WorkerOutcome { finished: true }
    }

    /// One update from a batch of positives. Returns the summed loss.
    fn train_batch(&self, batch: &[(usize, u32)], rng: &mut Rng, s: &mut Scratch) -> f64 {
        let train = self.store.train();
        let width = self.width;
        let model = self.cfg.model;
        s.grads.clear();
        let mut total = 0.0;
        for &(i, partition) in batch {
            let pos = train[i];
            let scope = match self.cfg.negative_scope {
                NegativeScope::Global => SamplingScope::Global(self.store.num_entities()),
                NegativeScope::Local => SamplingScope::Local(&self.rosters[partition as usize]),
            };
            let negs = match sample_negatives(pos, self.cfg.negatives, scope, rng) {
                Ok(n) => n,
                // A partition touching a single entity has nothing to
                // contrast against; fall back to the global scope.
                Err(_) => sample_negatives(pos, self.cfg.negatives, SamplingScope::Global(self.store.num_entities()), rng)
                    .expect("stores used for training hold at least two entities"),
            };
            s.triples.clear();
            s.triples.push(pos);
            s.triples.extend(negs.iter().map(NegativeSample::triple));
            for j in 0..s.triples.len() {
                let t = s.triples[j];
                s.load(&self.shared, j, t, width);
                let (h, r, tt) = s.rows(j, width);
                s.scores[j] = models::score_rows(&model, h, r, tt);
            }
            let (l, d_pos) = loss_and_slopes(self.cfg.loss, self.cfg.margin, s.scores[0], &s.scores[1..], &mut s.slopes);
            total += l;
            for j in 0..s.triples.len() {
                let slope = if j == 0 { d_pos } else { s.slopes[j - 1] };
                if slope == 0.0 {
                    continue;
                }
                s.accumulate(j, slope, &model, width);
            }
        }
        if self.cfg.regularization > 0.0 {
            total += regularize(&mut s.grads, width, self.cfg.regularization);
        }
        let inv = 1.0 / batch.len() as f64;
        for (k, key) in s.grads.keys.iter().enumerate() {
            let (matrix, ada, row) = self.shared.matrix(*key);
            let g = &s.grads.grads[k * width..(k + 1) * width];
            apply_update(self.cfg.optimizer, self.cfg.learning_rate, inv, matrix, ada, row, width, g);
        }
        total
    }

    /// Writes the table, optimizer state and a JSON state file to `dir`.
    pub fn checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let table = self.table();
        ingest::write_matrix_file(&dir.join(ingest::ENTITY_MATRIX), self.dtype, self.cfg.dim, table.entity_matrix())?;
        ingest::write_matrix_file(&dir.join(ingest::RELATION_MATRIX), self.dtype, self.cfg.dim, table.relation_matrix())?;
        if let (Some(e), Some(r)) = (&self.shared.ada_entities, &self.shared.ada_relations) {
            ingest::write_matrix_file(&dir.join(ADA_ENTITIES), self.dtype, self.cfg.dim, &e.to_vec())?;
            ingest::write_matrix_file(&dir.join(ADA_RELATIONS), self.dtype, self.cfg.dim, &r.to_vec())?;
        }
        let state = CheckpointState {
            config: self.cfg.clone(),
            num_entities: self.store.num_entities(),
            num_relations: self.store.num_relations(),
            epoch: self.epoch,
            step: self.step,
            epoch_wall_ms: self.epoch_wall_ms,
            log: self.log.clone(),
            workers: self.workers.clone(),
        };
        let path = dir.join(STATE_FILE);
        fs::write(&path, serde_json::to_vec_pretty(&state)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores a checkpoint written by [`Trainer::checkpoint`]. When
    /// `expected` is given its dimension must match the checkpoint and its
    /// epoch and step targets replace the stored ones.
    pub fn resume(
        dir: impl AsRef<Path>,
        store: &'a TripleStore,
        plan: &PartitionPlan,
        expected: Option<&TrainConfig>,
    ) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STATE_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: CheckpointState =
            serde_json::from_slice(&bytes).map_err(|e| Error::Corrupt { path: path.clone(), message: e.to_string() })?;
        let mut cfg = state.config.clone();
        if let Some(exp) = expected {
            if exp.dim != cfg.dim {
                return Err(Error::DimMismatch { expected: exp.dim, found: cfg.dim });
            }
            cfg.epochs = exp.epochs;
            cfg.max_steps = exp.max_steps;
        }
        let table = ingest::read_table(dir)?;
        if table.dim() != cfg.dim {
            return Err(Error::DimMismatch { expected: cfg.dim, found: table.dim() });
        }
        if state.num_entities != store.num_entities() || state.num_relations != store.num_relations() {
            return Err(Error::Corrupt { path, message: "checkpoint was written for a different store".into() });
        }
        let mut trainer = Trainer::with_table(store, plan, cfg, table)?;
        if state.workers.len() != trainer.workers.len()
            || state.workers.iter().zip(&trainer.workers).any(|(a, b)| a.partitions != b.partitions)
        {
            return Err(Error::Corrupt { path, message: "worker layout does not match the plan".into() });
        }
        if let Optimizer::AdaGrad { .. } = trainer.cfg.optimizer {
            let (_, dim_e, _, e) = ingest::read_matrix(dir.join(ADA_ENTITIES))?;
            let (_, dim_r, _, r) = ingest::read_matrix(dir.join(ADA_RELATIONS))?;
            if dim_e != trainer.cfg.dim || dim_r != trainer.cfg.dim {
                return Err(Error::DimMismatch { expected: trainer.cfg.dim, found: dim_e });
            }
            trainer.shared.ada_entities = Some(SharedMatrix::from_slice(&e));
            trainer.shared.ada_relations = Some(SharedMatrix::from_slice(&r));
        }
        trainer.workers = state.workers;
        trainer.epoch = state.epoch;
        trainer.step = state.step;
        trainer.epoch_wall_ms = state.epoch_wall_ms;
        trainer.log = state.log;
        Ok(trainer)
    }

    pub fn finish(self) -> (EmbeddingTable, TrainLog) {
        (self.table(), self.log)
    }
}

/// Adds `reg * ||x||^2` for every touched row to the loss and its gradient.
fn regularize(grads: &mut BatchGrads, width: usize, reg: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..grads.keys.len() {
        let vals = &grads.values[k * width..(k + 1) * width];
        let g = &mut grads.grads[k * width..(k + 1) * width];
        for (gi, &v) in g.iter_mut().zip(vals) {
            total += reg * v * v;
            *gi += 2.0 * reg * v;
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn apply_update(
    optimizer: Optimizer,
    lr: f64,
    scale: f64,
    matrix: &SharedMatrix,
    ada: Option<&SharedMatrix>,
    row: usize,
    width: usize,
    g: &[f64],
) {
    let base = row * width;
    match (optimizer, ada) {
        (Optimizer::AdaGrad { eps }, Some(acc)) => {
            for (j, &gj) in g.iter().enumerate() {
                let gj = gj * scale;
                let sum = acc.load(base + j) + gj * gj;
                acc.store(base + j, sum);
                matrix.store(base + j, matrix.load(base + j) - lr * gj / (sum.sqrt() + eps));
            }
        }
        _ => {
            for (j, &gj) in g.iter().enumerate() {
                matrix.store(base + j, matrix.load(base + j) - lr * (gj * scale));
            }
        }
    }
}

/// Per-worker buffers reused across batches.
struct Scratch {
    triples: Vec<Triple>,
    rows: Vec<f64>,
    scores: Vec<f64>,
    slopes: Vec<f64>,
    gh: Vec<f64>,
    gr: Vec<f64>,
    gt: Vec<f64>,
    grads: BatchGrads,
}

impl Scratch {
    fn new(width: usize, negatives: usize) -> Self {
        Scratch {
            triples: Vec::with_capacity(negatives + 1),
            rows: vec![0.0; 3 * width * (negatives + 1)],
            scores: vec![0.0; negatives + 1],
            slopes: vec![0.0; negatives],
            gh: vec![0.0; width],
            gr: vec![0.0; width],
            gt: vec![0.0; width],
            grads: BatchGrads::default(),
        }
    }

    fn load(&mut self, shared: &Shared, j: usize, t: Triple, width: usize) {
        let base = 3 * width * j;
        shared.entities.read_row(t.head as usize, width, &mut self.rows[base..base + width]);
        shared.relations.read_row(t.relation as usize, width, &mut self.rows[base + width..base + 2 * width]);
        shared.entities.read_row(t.tail as usize, width, &mut self.rows[base + 2 * width..base + 3 * width]);
    }

    fn rows(&self, j: usize, width: usize) -> (&[f64], &[f64], &[f64]) {
        let base = 3 * width * j;
        (
            &self.rows[base..base + width],
            &self.rows[base + width..base + 2 * width],
            &self.rows[base + 2 * width..base + 3 * width],
        )
    }

    fn accumulate(&mut self, j: usize, slope: f64, model: &ModelKind, width: usize) {
        let t = self.triples[j];
        let base = 3 * width * j;
        let (h, rest) = self.rows[base..base + 3 * width].split_at(width);
        let (r, tt) = rest.split_at(width);
        models::grad_rows(model, h, r, tt, &mut self.gh, &mut self.gr, &mut self.gt);
        self.grads.add(RowKey::Entity(t.head), width, h, slope, &self.gh);
        self.grads.add(RowKey::Relation(t.relation), width, r, slope, &self.gr);
        self.grads.add(RowKey::Entity(t.tail), width, tt, slope, &self.gt);
    }
}

/// Initialises a table, trains it under `plan` and returns it with its log.
pub fn train(store: &TripleStore, plan: &PartitionPlan, cfg: TrainConfig, exec: Execution) -> Result<(EmbeddingTable, TrainLog)> {
    let mut trainer = Trainer::new(store, plan, cfg)?;
    trainer.run(exec)?;
    Ok(trainer.finish())
}
