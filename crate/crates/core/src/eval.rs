//! Link prediction ranking and entity typing probes on frozen embeddings.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::models::{self, EmbeddingTable, ModelKind};
use crate::ontology::{ClassHierarchy, ClassId};
use crate::rng;
use crate::store::{EntityId, RelationId, TripleStore};

pub const HITS_AT: [u32; 3] = [1, 3, 10];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Raw,
    #[default]
    Filtered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    /// `(head, relation, ?)` with the true tail.
    Tail { head: EntityId, relation: RelationId, answer: EntityId },
    /// `(?, relation, tail)` with the true head.
    Head { relation: RelationId, tail: EntityId, answer: EntityId },
}

impl Query {
    pub fn answer(&self) -> EntityId {
        match *self {
            Query::Tail { answer, .. } | Query::Head { answer, .. } => answer,
        }
    }

    pub fn relation(&self) -> RelationId {
        match *self {
            Query::Tail { relation, .. } | Query::Head { relation, .. } => relation,
        }
    }
}

/// Known true answers for every `(head, relation)` and `(relation, tail)`
/// pair across all splits.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), Vec<EntityId>>,
    heads: HashMap<(RelationId, EntityId), Vec<EntityId>>,
}

impl FilterIndex {
    pub fn new(store: &TripleStore) -> Self {
        let mut index = FilterIndex::default();
        for t in store.triples() {
            index.tails.entry((t.head, t.relation)).or_default().push(t.tail);
            index.heads.entry((t.relation, t.tail)).or_default().push(t.head);
        }
        for v in index.tails.values_mut().chain(index.heads.values_mut()) {
            v.sort_unstable();
            v.dedup();
        }
        index
    }

    /// True answers of the query's pattern, the query's own answer included.
    pub fn known(&self, q: &Query) -> &[EntityId] {
        let list = match *q {
            Query::Tail { head, relation, .. } => self.tails.get(&(head, relation)),
            Query::Head { relation, tail, .. } => self.heads.get(&(relation, tail)),
        };
        list.map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Rank of `scores[answer]` among all candidates except those in `exclude`
/// (the answer itself is never excluded): one plus the number scoring
/// strictly higher plus half, rounded down, of those tying with it.
pub fn rank_from_scores(scores: &[f64], answer: usize, exclude: &[EntityId]) -> u64 {
    let target = scores[answer];
    let (mut higher, mut ties) = (0u64, 0u64);
    for (e, &s) in scores.iter().enumerate() {
        if e == answer {
            continue;
        }
        if s > target {
            higher += 1;
        } else if s == target {
            ties += 1;
        }
    }
    for &e in exclude {
        let e = e as usize;
        if e == answer {
            continue;
        }
        let s = scores[e];
        if s > target {
            higher -= 1;
        } else if s == target {
            ties -= 1;
        }
    }
    1 + higher + ties / 2
}

/// Scores every candidate for `q` into `scores` and ranks the answer.
pub fn rank_query(
    model: &ModelKind,
    table: &EmbeddingTable,
    q: &Query,
    filter: Option<&FilterIndex>,
    scores: &mut Vec<f64>,
) -> u64 {
    scores.resize(table.num_entities(), 0.0);
    match *q {
        Query::Tail { head, relation, .. } => models::score_tails(model, table, head, relation, scores),
        Query::Head { relation, tail, .. } => models::score_heads(model, table, relation, tail, scores),
    }
    let exclude = filter.map(|f| f.known(q)).unwrap_or(&[]);
    rank_from_scores(scores, q.answer() as usize, exclude)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    pub queries: usize,
    pub mrr: f64,
    pub mean_rank: f64,
    pub hits_at: BTreeMap<u32, f64>,
}

impl RankMetrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = u64>) -> Self {
        let (mut n, mut rr, mut sum) = (0usize, 0.0, 0.0);
        let mut hits = [0usize; HITS_AT.len()];
        for r in ranks {
            n += 1;
            rr += 1.0 / r as f64;
            sum += r as f64;
            for (h, &k) in hits.iter_mut().zip(&HITS_AT) {
                if r <= k as u64 {
                    *h += 1;
                }
            }
        }
        let denom = n.max(1) as f64;
        RankMetrics {
            queries: n,
            mrr: rr / denom,
            mean_rank: sum / denom,
            hits_at: HITS_AT.iter().zip(hits).map(|(&k, h)| (k, h as f64 / denom)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    #[serde(flatten)]
    pub overall: RankMetrics,
    pub per_relation: BTreeMap<String, RankMetrics>,
}

impl EvalReport {
    pub fn mrr(&self) -> f64 {
        self.overall.mrr
    }

    pub fn hits(&self, k: u32) -> f64 {
        self.overall.hits_at[&k]
    }

    /// Aligned plain-text rendering for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<40} {:>8} {:>8} {:>8} {:>8} {:>8}\n", "relation", "queries", "MRR", "H@1", "H@3", "H@10");
        let row = |name: &str, m: &RankMetrics| {
            format!(
                "{:<40} {:>8} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                name, m.queries, m.mrr, m.hits_at[&1], m.hits_at[&3], m.hits_at[&10]
            )
        };
        for (name, m) in &self.per_relation {
            let short: String = name.chars().take(40).collect();
            out.push_str(&row(&short, m));
        }
        out.push_str(&row(&format!("ALL ({:?})", self.setting).to_lowercase(), &self.overall));
        out
    }
}

/// Ranks of the tail query then the head query of every test triple.
pub fn lp_ranks(
    table: &EmbeddingTable,
    model: &ModelKind,
    store: &TripleStore,
    setting: Setting,
    exec: Execution,
) -> Result<Vec<(Query, u64)>> {
    let test = store.test();
    if test.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    for t in test {
        table.check_ids(*t)?;
    }
    let filter = match setting {
        Setting::Filtered => Some(FilterIndex::new(store)),
        Setting::Raw => None,
    };
    let per_triple = exec.map_with(test.len(), Vec::new, |scores, i| {
        let t = test[i];
        let tail = Query::Tail { head: t.head, relation: t.relation, answer: t.tail };
        let head = Query::Head { relation: t.relation, tail: t.tail, answer: t.head };
        [
            (tail, rank_query(model, table, &tail, filter.as_ref(), scores)),
            (head, rank_query(model, table, &head, filter.as_ref(), scores)),
        ]
    });
    Ok(per_triple.into_iter().flatten().collect())
}

/// Mean reciprocal rank and Hits@{1,3,10} over `2 * |test|` queries.
pub fn eval_lp(
    table: &EmbeddingTable,
    model: &ModelKind,
    store: &TripleStore,
    setting: Setting,
    exec: Execution,
) -> Result<EvalReport> {
    let ranks = lp_ranks(table, model, store, setting, exec)?;
    let mut by_relation: BTreeMap<RelationId, Vec<u64>> = BTreeMap::new();
    for (q, r) in &ranks {
        by_relation.entry(q.relation()).or_default().push(*r);
    }
    let per_relation = by_relation
        .into_iter()
        .map(|(rel, rs)| {
            let name = store.relations().name(rel).unwrap_or("?").to_owned();
            (name, RankMetrics::from_ranks(rs))
        })
        .collect();
    Ok(EvalReport { setting, overall: RankMetrics::from_ranks(ranks.iter().map(|(_, r)| *r)), per_relation })
}

// ---------------------------------------------------------------------------
// Entity typing

/// Classes with fewer labelled entities are left out of the typing report.
pub const MIN_POSITIVES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypingConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2_grid: [f64; 3],
    pub threshold: f64,
}

impl Default for TypingConfig {
    fn default() -> Self {
        TypingConfig { iterations: 200, learning_rate: 0.5, l2_grid: [1e-4, 1e-3, 1e-2], threshold: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Confusion {
    /// Precision, recall and F1, each taken as 0 when undefined.
    pub fn prf(&self) -> Prf {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }

    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: String,
    pub depth: u32,
    pub l2: f64,
    pub confusion: Confusion,
    #[serde(flatten)]
    pub metrics: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub depth: u32,
    pub classes: usize,
    /// Macro averages over the level's classes.
    #[serde(flatten)]
    pub metrics: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypingReport {
    pub per_class: Vec<ClassResult>,
    pub per_level: Vec<LevelResult>,
    pub micro: Prf,
    pub skipped: Vec<String>,
}

impl TypingReport {
    /// Aggregates per-class results into level macro averages and the
    /// micro average over all confusion counts.
    pub fn from_classes(per_class: Vec<ClassResult>, skipped: Vec<String>) -> Self {
        let mut levels: BTreeMap<u32, Vec<&Prf>> = BTreeMap::new();
        let mut total = Confusion::default();
        for c in &per_class {
            levels.entry(c.depth).or_default().push(&c.metrics);
            total.tp += c.confusion.tp;
            total.fp += c.confusion.fp;
            total.fn_ += c.confusion.fn_;
        }
        let per_level = levels
            .into_iter()
            .map(|(depth, ms)| {
                let n = ms.len() as f64;
                LevelResult {
                    depth,
                    classes: ms.len(),
                    metrics: Prf {
                        precision: ms.iter().map(|m| m.precision).sum::<f64>() / n,
                        recall: ms.iter().map(|m| m.recall).sum::<f64>() / n,
                        f1: ms.iter().map(|m| m.f1).sum::<f64>() / n,
                    },
                }
            })
            .collect();
        TypingReport { micro: total.prf(), per_class, per_level, skipped }
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<32} {:>5} {:>8} {:>8} {:>8}\n", "class", "depth", "P", "R", "F1");
        for c in &self.per_class {
            let short: String = c.class.chars().take(32).collect();
            out.push_str(&format!(
                "{:<32} {:>5} {:>8.4} {:>8.4} {:>8.4}\n",
                short, c.depth, c.metrics.precision, c.metrics.recall, c.metrics.f1
            ));
        }
        for l in &self.per_level {
            out.push_str(&format!(
                "{:<32} {:>5} {:>8.4} {:>8.4} {:>8.4}\n",
                format!("level {} ({} classes)", l.depth, l.classes),
                l.depth,
                l.metrics.precision,
                l.metrics.recall,
                l.metrics.f1
            ));
        }
        out.push_str(&format!(
            "{:<32} {:>5} {:>8.4} {:>8.4} {:>8.4}\n",
            "micro", "-", self.micro.precision, self.micro.recall, self.micro.f1
        ));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fold {
    Train,
    Valid,
    Test,
}

/// Splits typed entities 80/10/10. Entities are grouped by lowest class,
/// each group shuffled, groups concatenated in class order, and position
/// `i` of the concatenation goes to train for `i mod 10 < 8`, valid for 8
/// and test for 9, so each class spreads across the folds in proportion.
pub fn typing_split(hierarchy: &ClassHierarchy, entities: &[EntityId], seed: u64) -> Vec<Fold> {
    let mut groups: BTreeMap<Option<ClassId>, Vec<usize>> = BTreeMap::new();
    for (i, &e) in entities.iter().enumerate() {
        groups.entry(hierarchy.lowest_class(e)).or_default().push(i);
    }
    let mut rng = rng::seeded(seed);
    let mut folds = vec![Fold::Train; entities.len()];
    let mut pos = 0usize;
    for members in groups.values_mut() {
        rng::shuffle(&mut rng, members);
        for &i in members.iter() {
            folds[i] = match pos % 10 {
                8 => Fold::Valid,
                9 => Fold::Test,
                _ => Fold::Train,
            };
            pos += 1;
        }
    }
    folds
}

struct Features {
    rows: Vec<f64>,
    width: usize,
}

impl Features {
    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.width..(i + 1) * self.width]
    }
}

/// L2-regularised logistic regression by full-batch gradient descent.
fn fit_logistic(x: &Features, idx: &[usize], y: &[bool], l2: f64, cfg: &TypingConfig) -> (Vec<f64>, f64) {
    let w_len = x.width;
    let (mut w, mut b) = (vec![0.0; w_len], 0.0);
    let n = idx.len().max(1) as f64;
    let mut gw = vec![0.0; w_len];
    for _ in 0..cfg.iterations {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for &i in idx {
            let row = x.row(i);
            let z = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = sigmoid(z) - if y[i] { 1.0 } else { 0.0 };
            for (g, a) in gw.iter_mut().zip(row) {
                *g += err * a;
            }
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= cfg.learning_rate * (g / n + l2 * *wj);
        }
        b -= cfg.learning_rate * gb / n;
    }
    (w, b)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn predict(x: &Features, idx: &[usize], model: &(Vec<f64>, f64), threshold: f64) -> Vec<bool> {
    idx.iter()
        .map(|&i| {
            let z = model.1 + x.row(i).iter().zip(&model.0).map(|(a, c)| a * c).sum::<f64>();
            sigmoid(z) >= threshold
        })
        .collect()
}

/// One-vs-rest linear typing probe over frozen entity embeddings.
pub fn eval_typing(
    table: &EmbeddingTable,
    hierarchy: &ClassHierarchy,
    split_seed: u64,
    cfg: &TypingConfig,
    exec: Execution,
) -> Result<TypingReport> {
    let entities: Vec<EntityId> = (0..hierarchy.num_entities().min(table.num_entities()) as EntityId)
        .filter(|&e| !hierarchy.types(e).is_empty())
        .collect();
    let folds = typing_split(hierarchy, &entities, split_seed);
    let pick = |f: Fold| -> Vec<usize> { (0..entities.len()).filter(|&i| folds[i] == f).collect() };
    let (train, valid, test) = (pick(Fold::Train), pick(Fold::Valid), pick(Fold::Test));

    // Standardise with training statistics.
    let width = table.width();
    let mut rows: Vec<f64> = entities.iter().flat_map(|&e| table.entity(e).iter().copied()).collect();
    for j in 0..width {
        let n = train.len().max(1) as f64;
        let mean = train.iter().map(|&i| rows[i * width + j]).sum::<f64>() / n;
        let var = train.iter().map(|&i| (rows[i * width + j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..entities.len() {
            rows[i * width + j] = (rows[i * width + j] - mean) / sd;
        }
    }
    let x = Features { rows, width };

    let closures: Vec<Vec<ClassId>> = entities.iter().map(|&e| hierarchy.type_closure(e)).collect();
    let mut counts = vec![0usize; hierarchy.num_classes()];
    for c in closures.iter().flatten() {
        counts[*c as usize] += 1;
    }
    let (eligible, skipped): (Vec<ClassId>, Vec<ClassId>) =
        (0..hierarchy.num_classes() as ClassId).filter(|&c| counts[c as usize] > 0).partition(|&c| counts[c as usize] >= MIN_POSITIVES);
    if eligible.is_empty() {
        return Err(Error::NoTypingClasses);
    }

    let per_class = exec.map(eligible.len(), |k| {
        let class = eligible[k];
        let y: Vec<bool> = closures.iter().map(|cs| cs.binary_search(&class).is_ok()).collect();
        let actual = |idx: &[usize]| idx.iter().map(|&i| y[i]).collect::<Vec<_>>();
        let mut best: Option<(f64, f64, (Vec<f64>, f64))> = None;
        for &l2 in &cfg.l2_grid {
            let model = fit_logistic(&x, &train, &y, l2, cfg);
            let f1 = Confusion::from_predictions(&predict(&x, &valid, &model, cfg.threshold), &actual(&valid)).prf().f1;
            if best.as_ref().is_none_or(|(bf, _, _)| f1 > *bf) {
                best = Some((f1, l2, model));
            }
        }
        let (_, l2, model) = best.expect("non-empty grid");
        let confusion = Confusion::from_predictions(&predict(&x, &test, &model, cfg.threshold), &actual(&test));
        ClassResult {
            class: hierarchy.class_name(class).to_owned(),
            depth: hierarchy.class_depth(class).expect("valid class"),
            l2,
            confusion,
            metrics: confusion.prf(),
        }
    });
    let skipped = skipped.into_iter().map(|c| hierarchy.class_name(c).to_owned()).collect();
    Ok(TypingReport::from_classes(per_class, skipped))
}
