use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use semkge::eval::{self, Setting};
use semkge::models::{self, ModelKind};
use semkge::partition;
use semkge::trainer::{self, TrainConfig};
use semkge::{rng, Execution, TripleStore};

fn synthetic(triples: usize, entities: usize, relations: usize) -> TripleStore {
    let mut r = rng::seeded(1);
    let raw: Vec<(String, String, String)> = (0..triples)
        .map(|_| {
            let h = rng::below(&mut r, entities as u64);
            let t = rng::below(&mut r, entities as u64);
            (format!("e{h}"), format!("r{}", rng::below(&mut r, relations as u64)), format!("e{t}"))
        })
        .collect();
    let cut = triples * 9 / 10;
    TripleStore::from_splits(&raw[..cut], &[], &raw[cut..])
}

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn bench_eval(c: &mut Criterion) {
    let store = synthetic(20_000, 2_000, 20);
    let model = ModelKind::DistMult;
    let table = models::init_table(&model, store.num_entities(), store.num_relations(), 64, 3).unwrap();
    let mut group = c.benchmark_group("eval_lp");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| eval::eval_lp(&table, &model, &store, Setting::Filtered, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_epoch(c: &mut Criterion) {
    let store = synthetic(50_000, 5_000, 30);
    let plan = partition::partition_random(&store, 8, 0).unwrap();
    let mut cfg = TrainConfig::for_model(ModelKind::DistMult);
    cfg.dim = 64;
    cfg.epochs = 1;
    cfg.batch_size = 512;
    cfg.negatives = 16;
    cfg.workers = 8;
    let mut group = c.benchmark_group("train_epoch_w8");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| trainer::train(&store, &plan, cfg.clone(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_eval, bench_epoch);
criterion_main!(benches);
