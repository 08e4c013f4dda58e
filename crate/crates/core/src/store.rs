//! Integer-encoded triple storage.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type RelationId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: EntityId, relation: RelationId, tail: EntityId) -> Self {
        Triple { head, relation, tail }
    }
}

/// Dense bijection between names and ids, ids assigned in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Dictionary {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Dictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Names in id order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn from_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut dict = Dictionary::new();
        for n in names {
            dict.get_or_insert(n.as_ref());
        }
        dict
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// A knowledge graph as integer triples plus its entity and relation
/// dictionaries. Train, valid and test are contiguous, disjoint ranges of
/// `triples`, in that order.
#[derive(Clone, Debug, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    entities: Dictionary,
    relations: Dictionary,
    train: Range<usize>,
    valid: Range<usize>,
    test: Range<usize>,
}

pub type RawTriple = (String, String, String);

/// Encodes raw string triples; all of them form the training split.
pub fn encode_triples<S: AsRef<str>>(raw: &[(S, S, S)]) -> TripleStore {
    TripleStore::from_splits(raw, &[], &[])
}

impl TripleStore {
    /// Encodes train, valid and test in that order, so ids follow first
    /// appearance over their concatenation.
    pub fn from_splits<S: AsRef<str>>(
        train: &[(S, S, S)],
        valid: &[(S, S, S)],
        test: &[(S, S, S)],
    ) -> Self {
        let mut store = TripleStore::default();
        let mut bounds = [0usize; 3];
        for (i, part) in [train, valid, test].into_iter().enumerate() {
            for (h, r, t) in part {
                let head = store.entities.get_or_insert(h.as_ref());
                let relation = store.relations.get_or_insert(r.as_ref());
                let tail = store.entities.get_or_insert(t.as_ref());
                store.triples.push(Triple { head, relation, tail });
            }
            bounds[i] = store.triples.len();
        }
        store.train = 0..bounds[0];
        store.valid = bounds[0]..bounds[1];
        store.test = bounds[1]..bounds[2];
        store
    }

    /// Builds a store directly from encoded parts. Ids must be dense and in
    /// range.
    pub fn from_encoded(
        entities: Dictionary,
        relations: Dictionary,
        train: Vec<Triple>,
        valid: Vec<Triple>,
        test: Vec<Triple>,
    ) -> Result<Self> {
        let (n_train, n_valid) = (train.len(), valid.len());
        let mut triples = train;
        triples.extend(valid);
        triples.extend(test);
        for t in &triples {
            check(t.head, entities.len(), "entity")?;
            check(t.tail, entities.len(), "entity")?;
            check(t.relation, relations.len(), "relation")?;
        }
        let total = triples.len();
        Ok(TripleStore {
            triples,
            entities,
            relations,
            train: 0..n_train,
            valid: n_train..n_train + n_valid,
            test: n_train + n_valid..total,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn entities(&self) -> &Dictionary {
        &self.entities
    }

    pub fn relations(&self) -> &Dictionary {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        &self.triples[self.split_range(split)]
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Valid => self.valid.clone(),
            Split::Test => self.test.clone(),
        }
    }

    pub fn train(&self) -> &[Triple] {
        self.split(Split::Train)
    }

    pub fn test(&self) -> &[Triple] {
        self.split(Split::Test)
    }

    pub fn decode_triple(&self, t: Triple) -> Result<RawTriple> {
        let name = |dict: &Dictionary, id: u32, kind| {
            dict.name(id).map(str::to_owned).ok_or(Error::OutOfRange {
                kind,
                id: id as u64,
                size: dict.len() as u64,
            })
        };
        Ok((
            name(&self.entities, t.head, "entity")?,
            name(&self.relations, t.relation, "relation")?,
            name(&self.entities, t.tail, "entity")?,
        ))
    }
}

fn check(id: u32, size: usize, kind: &'static str) -> Result<()> {
    if (id as usize) < size {
        Ok(())
    } else {
        Err(Error::OutOfRange { kind, id: id as u64, size: size as u64 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(items: &[(&str, &str, &str)]) -> Vec<RawTriple> {
        items.iter().map(|&(h, r, t)| (h.into(), r.into(), t.into())).collect()
    }

    #[test]
    fn first_appearance_ids() {
        let store = encode_triples(&raw(&[("a", "r1", "b"), ("b", "r1", "c")]));
        assert_eq!(store.entities().id("a"), Some(0));
        assert_eq!(store.entities().id("b"), Some(1));
        assert_eq!(store.entities().id("c"), Some(2));
        assert_eq!(store.relations().id("r1"), Some(0));
        assert_eq!(store.triples(), &[Triple::new(0, 0, 1), Triple::new(1, 0, 2)]);
        assert_eq!(store.decode_triple(Triple::new(0, 0, 1)).unwrap(), ("a".into(), "r1".into(), "b".into()));
        assert_eq!(store.decode_triple(Triple::new(1, 0, 2)).unwrap(), ("b".into(), "r1".into(), "c".into()));
    }

    #[test]
    fn empty_input() {
        let store = encode_triples::<String>(&[]);
        assert_eq!(store.num_entities(), 0);
        assert_eq!(store.num_relations(), 0);
        assert!(store.is_empty());
    }

    #[test]
    fn decode_out_of_range() {
        let store = encode_triples(&raw(&[("a", "r1", "b"), ("b", "r1", "c")]));
        let err = store.decode_triple(Triple::new(99, 0, 1)).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { id: 99, size: 3, .. }));
    }

    #[test]
    fn duplicates_retained_and_splits_disjoint() {
        let tr = raw(&[("a", "r", "b"), ("a", "r", "b")]);
        let va = raw(&[("b", "r", "c")]);
        let te = raw(&[("c", "s", "a")]);
        let store = TripleStore::from_splits(&tr, &va, &te);
        assert_eq!(store.train().len(), 2);
        assert_eq!(store.split(Split::Valid).len(), 1);
        assert_eq!(store.test().len(), 1);
        assert_eq!(store.split_range(Split::Train).end, store.split_range(Split::Valid).start);
        assert_eq!(store.split_range(Split::Valid).end, store.split_range(Split::Test).start);
        assert_eq!(store.relations().id("s"), Some(1));
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(raw in prop::collection::vec(("[a-z]{1,3}", "[p-s]{1,2}", "[a-z]{1,3}"), 0..40)) {
            let store = encode_triples(&raw);
            prop_assert_eq!(store.len(), raw.len());
            for (t, orig) in store.triples().iter().zip(&raw) {
                prop_assert_eq!(&store.decode_triple(*t).unwrap(), orig);
            }
            let max_e = store.triples().iter().flat_map(|t| [t.head, t.tail]).max();
            prop_assert_eq!(max_e.map(|m| m as usize + 1).unwrap_or(0), store.num_entities());
            let max_r = store.triples().iter().map(|t| t.relation).max();
            prop_assert_eq!(max_r.map(|m| m as usize + 1).unwrap_or(0), store.num_relations());
        }
    }
}
