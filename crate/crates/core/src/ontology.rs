//! Class hierarchy reasoning over `subClassOf` edges and `rdf:type`
//! assertions.
//!
//! Depth is the longest path from a root (a class without superclasses), so
//! a class reached through a long specialisation chain counts as lower than
//! one reached through a short chain. Frequencies count every entity whose
//! type closure contains the class.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::store::{Dictionary, EntityId};

pub type ClassId = u32;

#[derive(Clone, Debug)]
pub struct ClassHierarchy {
    classes: Dictionary,
    parents: Vec<Vec<ClassId>>,
    entity_types: Vec<Vec<ClassId>>,
    stats: ClassStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ClassStats {
    /// Longest-path distance to a root.
    pub depth: Vec<u32>,
    /// Entities directly asserted to have the class.
    pub direct: Vec<usize>,
    /// Entities with the class anywhere in their type closure.
    pub frequency: Vec<usize>,
}

/// What was dropped while building a hierarchy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub skipped_assertions: usize,
    pub unknown_entities: BTreeSet<String>,
}

/// One row of the class frequency report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: String,
    pub depth: u32,
    pub direct_count: usize,
    pub closure_count: usize,
}

impl ClassHierarchy {
    /// Builds and validates a hierarchy. Assertions naming entities missing
    /// from `entities` are skipped and reported.
    pub fn build<S: AsRef<str>>(
        assertions: &[(S, S)],
        edges: &[(S, S)],
        entities: &Dictionary,
    ) -> Result<(Self, BuildReport)> {
        let mut classes = Dictionary::new();
        let mut parents: Vec<Vec<ClassId>> = Vec::new();
        let intern = |classes: &mut Dictionary, parents: &mut Vec<Vec<ClassId>>, name: &str| {
            let id = classes.get_or_insert(name);
            if id as usize == parents.len() {
                parents.push(Vec::new());
            }
            id
        };
        for (sub, sup) in edges {
            let (sub, sup) = (sub.as_ref(), sup.as_ref());
            if sub == sup {
                return Err(Error::CyclicHierarchy(sub.to_owned()));
            }
            let s = intern(&mut classes, &mut parents, sub);
            let p = intern(&mut classes, &mut parents, sup);
            parents[s as usize].push(p);
        }
        let mut report = BuildReport::default();
        let mut entity_types = vec![Vec::new(); entities.len()];
        for (entity, class) in assertions {
            let c = intern(&mut classes, &mut parents, class.as_ref());
            match entities.id(entity.as_ref()) {
                Some(e) => entity_types[e as usize].push(c),
                None => {
                    report.skipped_assertions += 1;
                    report.unknown_entities.insert(entity.as_ref().to_owned());
                }
            }
        }
        for list in parents.iter_mut().chain(entity_types.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        let order = topological_order(&parents).map_err(|c| Error::CyclicHierarchy(classes.name(c).unwrap().to_owned()))?;
        let mut hierarchy = ClassHierarchy { classes, parents, entity_types, stats: ClassStats::default() };
        hierarchy.stats = hierarchy.compute_stats(&order);
        Ok((hierarchy, report))
    }

    fn compute_stats(&self, order: &[ClassId]) -> ClassStats {
        let n = self.num_classes();
        let mut depth = vec![0u32; n];
        for &c in order {
            depth[c as usize] = self.parents[c as usize]
                .iter()
                .map(|&p| depth[p as usize] + 1)
                .max()
                .unwrap_or(0);
        }
        let mut direct = vec![0usize; n];
        let mut frequency = vec![0usize; n];
        let mut stamp = vec![u32::MAX; n];
        let mut stack = Vec::new();
        for (e, types) in self.entity_types.iter().enumerate() {
            for &c in types {
                direct[c as usize] += 1;
            }
            self.visit_closure(types, e as u32, &mut stamp, &mut stack, |c| frequency[c as usize] += 1);
        }
        ClassStats { depth, direct, frequency }
    }

    /// Calls `f` once for every class in the upward closure of `start`.
    /// `stamp` must hold no entry equal to `mark` on entry.
    fn visit_closure(
        &self,
        start: &[ClassId],
        mark: u32,
        stamp: &mut [u32],
        stack: &mut Vec<ClassId>,
        mut f: impl FnMut(ClassId),
    ) {
        stack.clear();
        stack.extend_from_slice(start);
        while let Some(c) = stack.pop() {
            if stamp[c as usize] == mark {
                continue;
            }
            stamp[c as usize] = mark;
            f(c);
            stack.extend(self.parents[c as usize].iter().copied().filter(|&p| stamp[p as usize] != mark));
        }
    }

    pub fn classes(&self) -> &Dictionary {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_types.len()
    }

    pub fn class_id(&self, name: &str) -> Result<ClassId> {
        self.classes.id(name).ok_or_else(|| Error::UnknownClass(name.to_owned()))
    }

    pub fn class_name(&self, c: ClassId) -> &str {
        self.classes.name(c).expect("class id from this hierarchy")
    }

    pub fn parents(&self, c: ClassId) -> &[ClassId] {
        &self.parents[c as usize]
    }

    /// Directly asserted classes of an entity, sorted by id.
    pub fn types(&self, e: EntityId) -> &[ClassId] {
        self.entity_types.get(e as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    fn check(&self, c: ClassId) -> Result<()> {
        if (c as usize) < self.num_classes() {
            Ok(())
        } else {
            Err(Error::OutOfRange { kind: "class", id: c as u64, size: self.num_classes() as u64 })
        }
    }

    /// Strict ancestors of `c`.
    pub fn ancestors(&self, c: ClassId) -> Result<BTreeSet<ClassId>> {
        self.check(c)?;
        let mut stamp = vec![u32::MAX; self.num_classes()];
        let mut out = BTreeSet::new();
        self.visit_closure(self.parents(c), 0, &mut stamp, &mut Vec::new(), |a| {
            out.insert(a);
        });
        Ok(out)
    }

    pub fn class_depth(&self, c: ClassId) -> Result<u32> {
        self.check(c)?;
        Ok(self.stats.depth[c as usize])
    }

    pub fn class_frequencies(&self) -> &ClassStats {
        &self.stats
    }

    /// Asserted classes of `e` together with all their ancestors, sorted.
    pub fn type_closure(&self, e: EntityId) -> Vec<ClassId> {
        let mut stamp = vec![u32::MAX; self.num_classes()];
        let mut out = Vec::new();
        self.visit_closure(self.types(e), 0, &mut stamp, &mut Vec::new(), |c| out.push(c));
        out.sort_unstable();
        out
    }

    /// Flags, per entity, whether `target` is in its type closure.
    pub fn entities_in_class(&self, target: ClassId) -> Vec<bool> {
        let n = self.num_classes();
        // A class reaches the target iff the target is among its ancestors or
        // itself; resolve that once per class.
        let mut reaches = vec![None::<bool>; n];
        fn resolve(h: &ClassHierarchy, c: ClassId, target: ClassId, memo: &mut [Option<bool>]) -> bool {
            if let Some(v) = memo[c as usize] {
                return v;
            }
            let v = c == target || h.parents[c as usize].iter().any(|&p| resolve(h, p, target, memo));
            memo[c as usize] = Some(v);
            v
        }
        self.entity_types
            .iter()
            .map(|types| types.iter().any(|&c| resolve(self, c, target, &mut reaches)))
            .collect()
    }

    /// The most specific directly asserted class of `e`: greatest depth,
    /// then lowest closure frequency, then lexicographically smallest name.
    pub fn lowest_class(&self, e: EntityId) -> Option<ClassId> {
        self.types(e).iter().copied().min_by(|&a, &b| {
            let (sa, sb) = (a as usize, b as usize);
            self.stats.depth[sb]
                .cmp(&self.stats.depth[sa])
                .then(self.stats.frequency[sa].cmp(&self.stats.frequency[sb]))
                .then_with(|| self.class_name(a).cmp(self.class_name(b)))
        })
    }

    /// Frequency report sorted by closure count, descending, then by name.
    pub fn frequency_report(&self) -> Vec<ClassRow> {
        let mut rows: Vec<ClassRow> = (0..self.num_classes())
            .map(|c| ClassRow {
                class: self.class_name(c as u32).to_owned(),
                depth: self.stats.depth[c],
                direct_count: self.stats.direct[c],
                closure_count: self.stats.frequency[c],
            })
            .collect();
        rows.sort_by(|a, b| b.closure_count.cmp(&a.closure_count).then_with(|| a.class.cmp(&b.class)));
        rows
    }
}

/// Orders classes so every class follows all of its superclasses. On a
/// cycle, returns one class on it.
fn topological_order(parents: &[Vec<ClassId>]) -> std::result::Result<Vec<ClassId>, ClassId> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let n = parents.len();
    let mut mark = vec![Mark::New; n];
    let mut order = Vec::with_capacity(n);
    let mut stack: Vec<(ClassId, usize)> = Vec::new();
    for root in 0..n as ClassId {
        if mark[root as usize] != Mark::New {
            continue;
        }
        mark[root as usize] = Mark::Open;
        stack.push((root, 0));
        while let Some(&mut (c, ref mut next)) = stack.last_mut() {
            if let Some(&p) = parents[c as usize].get(*next) {
                *next += 1;
                match mark[p as usize] {
                    Mark::Open => return Err(p),
                    Mark::Done => {}
                    Mark::New => {
                        mark[p as usize] = Mark::Open;
                        stack.push((p, 0));
                    }
                }
            } else {
                mark[c as usize] = Mark::Done;
                order.push(c);
                stack.pop();
            }
        }
    }
    Ok(order)
}
