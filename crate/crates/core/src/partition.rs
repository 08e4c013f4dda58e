//! Assignment of training triples to partitions.
//!
//! The semantic plan groups triples by the lowest class of their head entity
//! (untyped heads share one catch-all group) and then merges whole groups,
//! smallest into next-smallest, until the requested count remains. The
//! random plan is the baseline it is compared against.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{ClassHierarchy, ClassId};
use crate::rng;
use crate::store::TripleStore;

/// Label of the group holding triples whose key entity has no class.
pub const UNTYPED_LABEL: &str = "⊥";

pub const PLAN_FILE: &str = "plan.tsv";
pub const META_FILE: &str = "plan_meta.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Semantic,
    Random,
}

/// Which endpoint's class decides a triple's group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKey {
    #[default]
    Head,
    Tail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMeta {
    pub id: u32,
    pub label: String,
    pub size: usize,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionPlan {
    pub strategy: Strategy,
    /// Partition of each training triple, indexed by position in the train
    /// split.
    pub assignment: Vec<u32>,
    pub partitions: Vec<PartitionMeta>,
}

impl PartitionPlan {
    pub fn num_partitions(&self) -> usize {
        self.partitions.len()
    }

    /// Training-triple indices grouped by partition, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_partitions()];
        for (i, &p) in self.assignment.iter().enumerate() {
            out[p as usize].push(i);
        }
        out
    }

    /// Checks totality, dense non-empty ids and consistent metadata.
    pub fn validate(&self, num_train: usize) -> Result<()> {
        if self.assignment.len() != num_train {
            return Err(Error::InvalidPlan(format!(
                "plan covers {} triples, training split has {num_train}",
                self.assignment.len()
            )));
        }
        let k = self.num_partitions();
        let mut sizes = vec![0usize; k];
        for &p in &self.assignment {
            *sizes.get_mut(p as usize).ok_or_else(|| Error::InvalidPlan(format!("partition id {p} >= {k}")))? += 1;
        }
        for (i, (meta, &size)) in self.partitions.iter().zip(&sizes).enumerate() {
            if meta.id as usize != i {
                return Err(Error::InvalidPlan(format!("partition ids not dense at {i}")));
            }
            if size == 0 {
                return Err(Error::InvalidPlan(format!("partition {i} is empty")));
            }
            if meta.size != size {
                return Err(Error::InvalidPlan(format!("partition {i} records size {} but holds {size}", meta.size)));
            }
        }
        Ok(())
    }
}

struct Group {
    label: String,
    classes: Vec<String>,
    triples: Vec<usize>,
}

/// Groups training triples by the lowest class of the key entity and
/// coalesces down to exactly `target_k` partitions.
pub fn partition_semantic(
    store: &TripleStore,
    hierarchy: &ClassHierarchy,
    target_k: usize,
    key: ClassKey,
) -> Result<PartitionPlan> {
    let train = store.train();
    if target_k == 0 {
        return Err(Error::InvalidPartitionCount { k: 0, triples: train.len() });
    }
    let mut lowest: Vec<Option<Option<ClassId>>> = vec![None; store.num_entities()];
    let mut by_class: BTreeMap<Option<ClassId>, Vec<usize>> = BTreeMap::new();
    for (i, t) in train.iter().enumerate() {
        let e = match key {
            ClassKey::Head => t.head,
            ClassKey::Tail => t.tail,
        };
        let class = *lowest[e as usize].get_or_insert_with(|| hierarchy.lowest_class(e));
        by_class.entry(class).or_default().push(i);
    }
    // BTreeMap puts None first; keep the catch-all group last.
    let mut groups: Vec<Group> = by_class
        .iter()
        .filter(|(c, _)| c.is_some())
        .chain(by_class.get_key_value(&None))
        .map(|(c, triples)| {
            let label = match c {
                Some(c) => hierarchy.class_name(*c).to_owned(),
                None => UNTYPED_LABEL.to_owned(),
            };
            Group { classes: vec![label.clone()], label, triples: triples.clone() }
        })
        .collect();
    if target_k > groups.len() {
        return Err(Error::TooManyPartitions { requested: target_k, available: groups.len() });
    }

    let sizes: Vec<usize> = groups.iter().map(|g| g.triples.len()).collect();
    for (from, into) in coalesce_order(&sizes, target_k) {
        let moved = std::mem::take(&mut groups[from].triples);
        let moved_classes = std::mem::take(&mut groups[from].classes);
        let dst = &mut groups[into];
        dst.triples.extend(moved);
        dst.classes.extend(moved_classes);
    }
    let mut survivors: Vec<(usize, Group)> =
        groups.into_iter().enumerate().filter(|(_, g)| !g.triples.is_empty()).collect();
    survivors.sort_by_key(|(order, g)| (Reverse(g.triples.len()), *order));

    let mut assignment = vec![0u32; train.len()];
    let partitions = survivors
        .into_iter()
        .enumerate()
        .map(|(id, (_, g))| {
            for &i in &g.triples {
                assignment[i] = id as u32;
            }
            let label = if g.classes.len() == 1 { g.label } else { format!("{}+{}", g.label, g.classes.len() - 1) };
            PartitionMeta { id: id as u32, label, size: g.triples.len(), classes: g.classes }
        })
        .collect();
    Ok(PartitionPlan { strategy: Strategy::Semantic, assignment, partitions })
}

/// Greedy merge sequence over group sizes: repeatedly fold the smallest
/// group into the next-smallest, ties resolved by group order, until
/// `target_k` groups remain. Returns `(from, into)` index pairs.
pub fn coalesce_order(sizes: &[usize], target_k: usize) -> Vec<(usize, usize)> {
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        sizes.iter().enumerate().map(|(i, &s)| Reverse((s, i))).collect();
    let mut merges = Vec::new();
    while heap.len() > target_k.max(1) {
        let Reverse((small, from)) = heap.pop().unwrap();
        let Reverse((next, into)) = heap.pop().unwrap();
        merges.push((from, into));
        heap.push(Reverse((small + next, into)));
    }
    merges
}

/// Uniform seeded assignment of each training triple to one of `k`
/// partitions. Should a partition come out empty, one triple drawn at random
/// from the currently largest partition is moved into it.
pub fn partition_random(store: &TripleStore, k: usize, seed: u64) -> Result<PartitionPlan> {
    let n = store.train().len();
    if k == 0 || k > n {
        return Err(Error::InvalidPartitionCount { k, triples: n });
    }
    let mut rng = rng::seeded(seed);
    let mut assignment: Vec<u32> = (0..n).map(|_| rng::below(&mut rng, k as u64) as u32).collect();
    let mut sizes = vec![0usize; k];
    for &p in &assignment {
        sizes[p as usize] += 1;
    }
    for empty in 0..k {
        if sizes[empty] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&p| (sizes[p], Reverse(p))).unwrap();
        let pick = rng::below(&mut rng, sizes[largest] as u64) as usize;
        let idx = assignment.iter().enumerate().filter(|(_, &p)| p as usize == largest).nth(pick).unwrap().0;
        assignment[idx] = empty as u32;
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    let partitions = sizes
        .iter()
        .enumerate()
        .map(|(id, &size)| PartitionMeta { id: id as u32, label: format!("random-{id}"), size, classes: Vec::new() })
        .collect();
    Ok(PartitionPlan { strategy: Strategy::Random, assignment, partitions })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanStats {
    pub strategy: Strategy,
    pub num_partitions: usize,
    pub sizes: Vec<usize>,
    /// Largest partition size over mean partition size.
    pub balance: f64,
    /// Fraction of training entities that occur in more than one partition.
    pub entity_overlap: f64,
}

pub fn plan_stats(plan: &PartitionPlan, store: &TripleStore) -> PlanStats {
    let sizes: Vec<usize> = plan.partitions.iter().map(|p| p.size).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len().max(1) as f64;
    let balance = if mean > 0.0 { *sizes.iter().max().unwrap_or(&0) as f64 / mean } else { 0.0 };

    const UNSEEN: u32 = u32::MAX;
    let mut first = vec![UNSEEN; store.num_entities()];
    let mut shared = vec![false; store.num_entities()];
    for (t, &p) in store.train().iter().zip(&plan.assignment) {
        for e in [t.head, t.tail] {
            let slot = &mut first[e as usize];
            if *slot == UNSEEN {
                *slot = p;
            } else if *slot != p {
                shared[e as usize] = true;
            }
        }
    }
    let seen = first.iter().filter(|&&p| p != UNSEEN).count();
    let overlap = if seen == 0 { 0.0 } else { shared.iter().filter(|&&s| s).count() as f64 / seen as f64 };
    PlanStats { strategy: plan.strategy, num_partitions: plan.num_partitions(), sizes, balance, entity_overlap: overlap }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    id: u32,
    label: String,
    size: usize,
    classes: Vec<String>,
    strategy: Strategy,
}

/// Writes `plan.tsv` (`triple_index TAB partition_id`) and
/// `plan_meta.jsonl` (one JSON object per partition) into `dir`.
pub fn write_plan(plan: &PartitionPlan, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(PLAN_FILE);
    let io = |e| Error::io(&path, e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    for (i, p) in plan.assignment.iter().enumerate() {
        writeln!(w, "{i}\t{p}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join(META_FILE);
    let io = |e| Error::io(&path, e);
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    for m in &plan.partitions {
        let line = MetaLine {
            id: m.id,
            label: m.label.clone(),
            size: m.size,
            classes: m.classes.clone(),
            strategy: plan.strategy,
        };
        serde_json::to_writer(&mut w, &line)?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_plan(dir: impl AsRef<Path>) -> Result<PartitionPlan> {
    let dir = dir.as_ref();
    let path = dir.join(PLAN_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut assignment = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Parse { path: path.clone(), line: i + 1, message: "expected index TAB partition".into() };
        let (idx, part) = line.split_once('\t').ok_or_else(bad)?;
        let idx: usize = idx.trim().parse().map_err(|_| bad())?;
        if idx != assignment.len() {
            return Err(bad());
        }
        assignment.push(part.trim().parse().map_err(|_| bad())?);
    }
    let path = dir.join(META_FILE);
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut partitions = Vec::new();
    let mut strategy = Strategy::Random;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: MetaLine = serde_json::from_str(&line)?;
        strategy = m.strategy;
        partitions.push(PartitionMeta { id: m.id, label: m.label, size: m.size, classes: m.classes });
    }
    let plan = PartitionPlan { strategy, assignment, partitions };
    plan.validate(plan.assignment.len())?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (TripleStore, ClassHierarchy) {
        let raw = [("e1", "r", "e2"), ("e3", "r", "e4")];
        let store = crate::store::encode_triples(&raw);
        let types = [("e1", "Writer"), ("e3", "City")];
        let (h, _) = ClassHierarchy::build(&types, &[], store.entities()).unwrap();
        (store, h)
    }

    #[test]
    fn two_classes_two_partitions() {
        let (store, h) = toy();
        let plan = partition_semantic(&store, &h, 2, ClassKey::Head).unwrap();
        plan.validate(2).unwrap();
        assert_ne!(plan.assignment[0], plan.assignment[1]);
        let mut labels: Vec<_> = plan.partitions.iter().map(|p| p.label.clone()).collect();
        labels.sort();
        assert_eq!(labels, ["City", "Writer"]);
    }

    #[test]
    fn full_coalesce() {
        let (store, h) = toy();
        let plan = partition_semantic(&store, &h, 1, ClassKey::Head).unwrap();
        assert_eq!(plan.assignment, vec![0, 0]);
        assert_eq!(plan.partitions[0].classes.len(), 2);
    }

    #[test]
    fn too_many_partitions() {
        let (store, h) = toy();
        assert!(matches!(
            partition_semantic(&store, &h, 3, ClassKey::Head),
            Err(Error::TooManyPartitions { requested: 3, available: 2 })
        ));
    }

    #[test]
    fn tail_key_groups_by_tail_class() {
        let (store, h) = toy();
        // Tails e2/e4 are untyped: a single catch-all group.
        let plan = partition_semantic(&store, &h, 1, ClassKey::Tail).unwrap();
        assert_eq!(plan.partitions[0].label, UNTYPED_LABEL);
        assert!(partition_semantic(&store, &h, 2, ClassKey::Tail).is_err());
    }

    /// Independent re-derivation of the greedy merge: sort, fold the first
    /// element into the second, re-sort, repeat.
    fn greedy_oracle(sizes: &[usize], k: usize) -> Vec<usize> {
        let mut groups: Vec<(usize, usize)> = sizes.iter().copied().zip(0..).collect();
        while groups.len() > k {
            groups.sort();
            let (s0, _) = groups.remove(0);
            groups[0].0 += s0;
        }
        let mut out: Vec<usize> = groups.into_iter().map(|g| g.0).collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out
    }

    #[test]
    fn coalescing_matches_hand_trace() {
        let sizes = [100, 50, 10, 5, 1];
        assert_eq!(coalesce_order(&sizes, 3), vec![(4, 3), (3, 2)]);
        assert_eq!(greedy_oracle(&sizes, 3), vec![100, 50, 16]);
    }

    #[test]
    fn semantic_plan_sizes_match_oracle() {
        let counts = [100usize, 50, 10, 5, 1];
        let classes = ["A", "B", "C", "D", "E"];
        let mut raw = Vec::new();
        let mut types = Vec::new();
        for (c, &n) in classes.iter().zip(&counts) {
            types.push((format!("h{c}"), c.to_string()));
            for i in 0..n {
                raw.push((format!("h{c}"), "r".to_string(), format!("t{c}{i}")));
            }
        }
        let store = crate::store::encode_triples(&raw);
        let (h, _) = ClassHierarchy::build(&types, &[], store.entities()).unwrap();
        let plan = partition_semantic(&store, &h, 3, ClassKey::Head).unwrap();
        plan.validate(store.train().len()).unwrap();
        let sizes: Vec<usize> = plan.partitions.iter().map(|p| p.size).collect();
        assert_eq!(sizes, greedy_oracle(&counts, 3));
        assert_eq!(plan.partitions[2].classes, vec!["C", "D", "E"]);
        assert_eq!(plan.partitions[2].label, "C+2");
    }

    #[test]
    fn random_plan_basics() {
        let raw: Vec<_> = (0..10).map(|i| (format!("a{i}"), "r".to_string(), format!("b{i}"))).collect();
        let store = crate::store::encode_triples(&raw);
        let one = partition_random(&store, 1, 3).unwrap();
        assert!(one.assignment.iter().all(|&p| p == 0));
        let a = partition_random(&store, 10, 3).unwrap();
        a.validate(10).unwrap();
        assert_eq!(a, partition_random(&store, 10, 3).unwrap());
        assert!(partition_random(&store, 11, 3).is_err());
        assert!(partition_random(&store, 0, 3).is_err());
    }

    #[test]
    fn random_plan_is_balanced_within_binomial_bounds() {
        let n = 100_000usize;
        let raw: Vec<_> = (0..n).map(|i| (format!("e{}", i % 977), "r".to_string(), format!("e{}", (i * 7) % 977))).collect();
        let store = crate::store::encode_triples(&raw);
        let plan = partition_random(&store, 4, 42).unwrap();
        // Binomial(n, 1/4): sd = sqrt(n p (1-p)) ~ 137; 3 sd ~ 411 < 5% of 25000.
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for p in &plan.partitions {
            let dev = (p.size as f64 - 25_000.0).abs();
            assert!(dev <= 3.0 * sd, "partition {} size {}", p.id, p.size);
            assert!(dev <= 0.05 * 25_000.0);
        }
    }

    #[test]
    fn stats_for_single_and_shared() {
        let (store, h) = toy();
        let one = partition_semantic(&store, &h, 1, ClassKey::Head).unwrap();
        let s = plan_stats(&one, &store);
        assert_eq!(s.balance, 1.0);
        assert_eq!(s.entity_overlap, 0.0);

        let raw = [("a", "r", "e"), ("b", "r", "e")];
        let store = crate::store::encode_triples(&raw);
        let (h, _) = ClassHierarchy::build(&[("a", "X"), ("b", "Y")], &[], store.entities()).unwrap();
        let plan = partition_semantic(&store, &h, 2, ClassKey::Head).unwrap();
        let s = plan_stats(&plan, &store);
        // a, b, e seen; only e is shared.
        assert!((s.entity_overlap - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn plan_files_roundtrip() {
        let (store, h) = toy();
        let plan = partition_semantic(&store, &h, 2, ClassKey::Head).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_plan(&plan, dir.path()).unwrap();
        let tsv = fs::read_to_string(dir.path().join(PLAN_FILE)).unwrap();
        assert_eq!(tsv.lines().count(), 2);
        assert_eq!(read_plan(dir.path()).unwrap(), plan);
    }

    #[test]
    fn validate_rejects_broken_plans() {
        let plan = PartitionPlan {
            strategy: Strategy::Random,
            assignment: vec![0, 0],
            partitions: vec![
                PartitionMeta { id: 0, label: "a".into(), size: 2, classes: vec![] },
                PartitionMeta { id: 1, label: "b".into(), size: 0, classes: vec![] },
            ],
        };
        assert!(plan.validate(2).is_err());
        assert!(plan.validate(3).is_err());
    }
}
