//! Budgeted selection of a training subgraph for a target class.
//!
//! The semantic selector is a baseline instantiation: it ranks every
//! training triple by a fixed priority and keeps the first `floor(p * n)`.
//!
//! 0. triples with an endpoint whose type closure holds the target class;
//! 1. triples with an endpoint within `hops` undirected hops of such an
//!    entity;
//! 2. everything else, by descending degree of the head entity.
//!
//! Ties keep training-index order. Because the order does not depend on
//! `p`, a selection at a smaller budget is a prefix of one at a larger
//! budget.

use std::cmp::Reverse;
use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ontology::{ClassHierarchy, ClassId};
use crate::rng;
use crate::store::TripleStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionBudget {
    pub p: f64,
    pub target_class: ClassId,
    pub hops: u32,
}

fn budget_size(p: f64, n: usize) -> Result<usize> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidFraction(p));
    }
    Ok((p * n as f64).floor() as usize)
}

/// Uniform seeded sample of `floor(p * |train|)` training indices, sorted.
pub fn select_random(store: &TripleStore, p: f64, seed: u64) -> Result<Vec<usize>> {
    let n = store.train().len();
    let m = budget_size(p, n)?;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::seeded(seed);
    // Partial Fisher-Yates: the first m slots end up a uniform sample.
    for i in 0..m {
        let j = i + rng::below(&mut rng, (n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

/// Training indices in selection order, without truncation.
pub fn semantic_priority_order(store: &TripleStore, hierarchy: &ClassHierarchy, target: ClassId, hops: u32) -> Result<Vec<usize>> {
    let train = store.train();
    let n_ent = store.num_entities();
    let in_class = hierarchy.entities_in_class(target);
    if !in_class.iter().any(|&b| b) {
        return Err(Error::UnoccupiedClass(hierarchy.class_name(target).to_owned()));
    }

    // Undirected CSR adjacency over the training graph.
    let mut degree = vec![0usize; n_ent];
    for t in train {
        degree[t.head as usize] += 1;
        degree[t.tail as usize] += 1;
    }
    let mut offsets = vec![0usize; n_ent + 1];
    for e in 0..n_ent {
        offsets[e + 1] = offsets[e] + degree[e];
    }
    let mut fill = offsets.clone();
    let mut adj = vec![0u32; offsets[n_ent]];
    for t in train {
        adj[fill[t.head as usize]] = t.tail;
        fill[t.head as usize] += 1;
        adj[fill[t.tail as usize]] = t.head;
        fill[t.tail as usize] += 1;
    }

    const FAR: u32 = u32::MAX;
    let mut dist = vec![FAR; n_ent];
    let mut queue = VecDeque::new();
    for (e, &member) in in_class.iter().enumerate().take(n_ent) {
        if member {
            dist[e] = 0;
            queue.push_back(e as u32);
        }
    }
    while let Some(e) = queue.pop_front() {
        let d = dist[e as usize];
        if d >= hops {
            continue;
        }
        for &nb in &adj[offsets[e as usize]..offsets[e as usize + 1]] {
            if dist[nb as usize] == FAR {
                dist[nb as usize] = d + 1;
                queue.push_back(nb);
            }
        }
    }

    let priority = |i: usize| {
        let t = train[i];
        let d = dist[t.head as usize].min(dist[t.tail as usize]);
        match d {
            0 => 0u8,
            FAR => 2,
            _ => 1,
        }
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| {
        let p = priority(i);
        let deg = if p == 2 { degree[train[i].head as usize] } else { 0 };
        (p, Reverse(deg), i)
    });
    Ok(order)
}

/// Deterministic priority selection of exactly `floor(p * |train|)`
/// training indices, returned in selection order.
pub fn select_semantic(store: &TripleStore, hierarchy: &ClassHierarchy, budget: &SelectionBudget) -> Result<Vec<usize>> {
    let m = budget_size(budget.p, store.train().len())?;
    if m == 0 {
        return Err(Error::EmptyBudget);
    }
    let mut order = semantic_priority_order(store, hierarchy, budget.target_class, budget.hops)?;
    order.truncate(m);
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::encode_triples;

    fn star() -> (TripleStore, ClassHierarchy) {
        // Center c typed P; leaves l0..l3 untyped; a disconnected pair.
        let raw = [
            ("x", "r", "y"),
            ("c", "r", "l0"),
            ("l1", "r", "c"),
            ("c", "r", "l2"),
            ("c", "r", "l3"),
            ("l0", "r", "z"),
        ];
        let store = encode_triples(&raw);
        let (h, _) = ClassHierarchy::build(&[("c", "P")], &[], store.entities()).unwrap();
        (store, h)
    }

    #[test]
    fn random_budget_sizes() {
        let raw: Vec<_> = (0..10).map(|i| (format!("a{i}"), "r".to_string(), format!("b{i}"))).collect();
        let store = encode_triples(&raw);
        assert_eq!(select_random(&store, 1.0, 1).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(select_random(&store, 0.5, 1).unwrap().len(), 5);
        assert_eq!(select_random(&store, 0.5, 9).unwrap(), select_random(&store, 0.5, 9).unwrap());
        assert!(select_random(&store, 0.0, 1).is_err());
        assert!(select_random(&store, 1.5, 1).is_err());
    }

    #[test]
    fn star_hops_zero() {
        let (store, h) = star();
        let p = h.class_id("P").unwrap();
        let sel = select_semantic(&store, &h, &SelectionBudget { p: 0.5, target_class: p, hops: 0 }).unwrap();
        // floor(0.5 * 6) = 3: the three lowest-index center triples.
        assert_eq!(sel, vec![1, 2, 3]);
        let sel = select_semantic(&store, &h, &SelectionBudget { p: 2.0 / 6.0 + 1e-9, target_class: p, hops: 0 }).unwrap();
        assert_eq!(sel, vec![1, 2]);
    }

    #[test]
    fn pure_star_half_budget() {
        let raw = [("c", "r", "l0"), ("c", "r", "l1"), ("c", "r", "l2"), ("c", "r", "l3")];
        let store = encode_triples(&raw);
        let (h, _) = ClassHierarchy::build(&[("c", "P")], &[], store.entities()).unwrap();
        let sel = select_semantic(&store, &h, &SelectionBudget { p: 0.5, target_class: 0, hops: 0 }).unwrap();
        assert_eq!(sel, vec![0, 1]);
    }

    #[test]
    fn one_hop_outranks_head_degree() {
        let raw = [("c", "r", "l0"), ("a", "r", "b"), ("a", "r", "d"), ("l0", "r", "z")];
        let store = encode_triples(&raw);
        let (h, _) = ClassHierarchy::build(&[("c", "P")], &[], store.entities()).unwrap();
        assert_eq!(semantic_priority_order(&store, &h, 0, 0).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(semantic_priority_order(&store, &h, 0, 1).unwrap(), vec![0, 3, 1, 2]);
    }

    #[test]
    fn hops_pull_in_neighbourhood() {
        let (store, h) = star();
        let p = h.class_id("P").unwrap();
        let full0 = semantic_priority_order(&store, &h, p, 0).unwrap();
        let full1 = semantic_priority_order(&store, &h, p, 1).unwrap();
        // (l0, r, z) touches a 1-hop neighbour; (x, r, y) is unreachable.
        assert_eq!(&full1[4..], &[5, 0]);
        assert_eq!(full0.len(), 6);
    }

    #[test]
    fn whole_graph_when_everything_touches_target() {
        let raw = [("a", "r", "b"), ("b", "r", "a"), ("a", "s", "c")];
        let store = encode_triples(&raw);
        let (h, _) = ClassHierarchy::build(&[("a", "Person")], &[], store.entities()).unwrap();
        let sel = select_semantic(&store, &h, &SelectionBudget { p: 1.0, target_class: 0, hops: 0 }).unwrap();
        let mut sorted = sel.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2]);
    }

    #[test]
    fn errors() {
        let (store, h) = star();
        let p = h.class_id("P").unwrap();
        assert!(matches!(
            select_semantic(&store, &h, &SelectionBudget { p: 0.1, target_class: p, hops: 0 }),
            Err(Error::EmptyBudget)
        ));
        let (h2, _) = ClassHierarchy::build(&[("ghost", "Q")], &[], store.entities()).unwrap();
        assert!(matches!(
            select_semantic(&store, &h2, &SelectionBudget { p: 1.0, target_class: 0, hops: 0 }),
            Err(Error::UnoccupiedClass(_))
        ));
    }
}
