#![allow(dead_code)]

use std::path::PathBuf;

use semkge::ingest::DatasetLayout;
use semkge::ontology::ClassHierarchy;
use semkge::rng;
use semkge::store::Dictionary;
use semkge::trainer::TrainConfig;
use semkge::TripleStore;

pub const TOY_PRESET: &str = include_str!("../../../../presets/toy/transe.kv");
pub const FB15K237_TRANSE: &str = include_str!("../../../../presets/fb15k-237/transe.kv");
pub const FB15K237_DISTMULT: &str = include_str!("../../../../presets/fb15k-237/distmult.kv");

/// A chain of six entities with `next` (i -> i+1) and `skip` (i -> i+2)
/// relations. `e_i = i * v`, `next = v`, `skip = 2v` is an exact TransE
/// solution and every query has a unique answer. The test split repeats the
/// training facts.
pub fn toy_transe_kg() -> TripleStore {
    let mut train = Vec::new();
    for i in 0..5 {
        train.push((format!("e{i}"), "next".to_string(), format!("e{}", i + 1)));
    }
    for i in 0..4 {
        train.push((format!("e{i}"), "skip".to_string(), format!("e{}", i + 2)));
    }
    TripleStore::from_splits(&train, &[], &train)
}

pub fn toy_preset() -> TrainConfig {
    TrainConfig::from_kv(TOY_PRESET).expect("toy preset parses")
}

/// Random triples over `entities` entities and `relations` relations, split
/// 80/10/10. Heads never equal tails.
pub fn synthetic_kg(triples: usize, entities: usize, relations: usize, seed: u64) -> TripleStore {
    let raw = random_raw(triples, entities, relations, seed);
    let a = triples * 8 / 10;
    let b = triples * 9 / 10;
    TripleStore::from_splits(&raw[..a], &raw[a..b], &raw[b..])
}

fn random_raw(triples: usize, entities: usize, relations: usize, seed: u64) -> Vec<(String, String, String)> {
    let mut r = rng::seeded(seed);
    (0..triples)
        .map(|_| {
            let h = rng::below(&mut r, entities as u64);
            let mut t = rng::below(&mut r, entities as u64);
            if t == h {
                t = (t + 1) % entities as u64;
            }
            (format!("e{h}"), format!("r{}", rng::below(&mut r, relations as u64)), format!("e{t}"))
        })
        .collect()
}

/// Class names, `(sub, super)` edges and `(entity, class)` assertions of a
/// random DAG. Superclasses are drawn among classes created earlier, and
/// names are shuffled so that ids do not follow the topological order.
pub struct RandomOntology {
    pub names: Vec<String>,
    pub edges: Vec<(String, String)>,
    pub assertions: Vec<(String, String)>,
}

pub fn random_ontology(seed: u64, max_classes: usize, entities: usize) -> RandomOntology {
    let mut r = rng::seeded(seed);
    let n = 1 + rng::below(&mut r, max_classes as u64) as usize;
    let mut names: Vec<String> = (0..n).map(|i| format!("C{i:03}")).collect();
    rng::shuffle(&mut r, &mut names);
    let mut edges = Vec::new();
    for i in 1..n {
        let k = rng::below(&mut r, 4);
        let mut seen = Vec::new();
        for _ in 0..k {
            let j = rng::below(&mut r, i as u64) as usize;
            if !seen.contains(&j) {
                seen.push(j);
                edges.push((names[i].clone(), names[j].clone()));
            }
        }
    }
    let mut assertions = Vec::new();
    for e in 0..entities {
        for _ in 0..rng::below(&mut r, 4) {
            let c = rng::below(&mut r, n as u64) as usize;
            assertions.push((format!("e{e}"), names[c].clone()));
        }
    }
    RandomOntology { names, edges, assertions }
}

pub fn entity_dict(n: usize) -> Dictionary {
    Dictionary::from_names((0..n).map(|e| format!("e{e}")))
}

/// A random KG whose entities carry classes from a random DAG.
pub fn typed_synthetic_kg(triples: usize, entities: usize, seed: u64) -> (TripleStore, ClassHierarchy) {
    let store = synthetic_kg(triples, entities, 12, seed);
    let onto = random_ontology(seed ^ 0xA5A5, 40, entities);
    let (h, _) = ClassHierarchy::build(&onto.assertions, &onto.edges, store.entities()).expect("random DAG is acyclic");
    (store, h)
}

/// Directory of a benchmark under `$SEMKGE_DATA_DIR`, if present.
pub fn dataset_dir(name: &str) -> Option<PathBuf> {
    let root = std::env::var_os("SEMKGE_DATA_DIR")?;
    let dir = PathBuf::from(root).join(name);
    dir.join("train.txt").exists().then_some(dir)
}

pub fn load_dataset(name: &str) -> Option<(TripleStore, Option<ClassHierarchy>)> {
    let layout = DatasetLayout::in_dir(dataset_dir(name)?);
    let store = layout.load_store().expect("dataset parses");
    let hierarchy = layout.load_hierarchy(store.entities()).expect("hierarchy builds").map(|(h, _)| h);
    Some((store, hierarchy))
}
