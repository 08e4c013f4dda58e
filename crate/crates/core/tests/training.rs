mod common;

use semkge::models::{self, ModelKind, Norm};
use semkge::partition;
use semkge::trainer::{self, NegativeScope, Optimizer, SamplingScope, Slot, TrainConfig, Trainer};
use semkge::{rng, Error, Execution, Triple};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn small_config(model: ModelKind) -> TrainConfig {
    let mut cfg = TrainConfig::for_model(model);
    cfg.dim = 12;
    cfg.batch_size = 10;
    cfg.negatives = 3;
    cfg.seed = 21;
    cfg
}

#[test]
fn toy_loss_falls_every_epoch_for_ten_epochs() {
    let store = common::toy_transe_kg();
    let plan = partition::partition_random(&store, 1, 0).unwrap();
    let mut cfg = common::toy_preset();
    cfg.epochs = 10;
    cfg.learning_rate = 0.01;
    cfg.negatives = 128;
    cfg.seed = 0;
    let (_, log) = trainer::train(&store, &plan, cfg, Execution::Sequential).unwrap();
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.mean_loss).collect();
    assert_eq!(losses.len(), 10);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let store = common::synthetic_kg(1250, 150, 5, 3);
    let plan = partition::partition_random(&store, 1, 0).unwrap();
    let mut cfg = small_config(ModelKind::TransE { norm: Norm::L2, margin: 4.0 });
    cfg.epochs = 20;
    // 1000 triples in batches of 10: 100 steps per epoch, 2000 in total.
    let (full, full_log) = trainer::train(&store, &plan, cfg.clone(), Execution::Sequential).unwrap();

    for stop in [1000u64, 1037] {
        let dir = tempfile::tempdir().unwrap();
        let mut first = Trainer::new(&store, &plan, cfg.clone()).unwrap();
        first.set_max_steps(Some(stop));
        first.run(Execution::Sequential).unwrap();
        assert_eq!(first.step(), stop);
        first.checkpoint(dir.path()).unwrap();
        drop(first);

        let mut resumed = Trainer::resume(dir.path(), &store, &plan, Some(&cfg)).unwrap();
        assert_eq!(resumed.step(), stop);
        resumed.run(Execution::Sequential).unwrap();
        assert_eq!(resumed.step(), 2000, "remaining {} steps completed", 2000 - stop);
        let (table, log) = resumed.finish();
        assert_eq!(table, full, "resumed at step {stop}");
        let losses = |l: &trainer::TrainLog| l.epochs.iter().map(|e| e.mean_loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&log), losses(&full_log));
    }
}

#[test]
fn resume_restores_sgd_state_too() {
    let store = common::synthetic_kg(500, 60, 3, 4);
    let plan = partition::partition_random(&store, 2, 1).unwrap();
    let mut cfg = small_config(ModelKind::DistMult);
    cfg.optimizer = Optimizer::Sgd;
    cfg.workers = 2;
    cfg.epochs = 4;
    let (full, _) = trainer::train(&store, &plan, cfg.clone(), Execution::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&store, &plan, cfg.clone()).unwrap();
    t.set_max_steps(Some(33));
    t.run(Execution::Sequential).unwrap();
    t.checkpoint(dir.path()).unwrap();
    let mut t = Trainer::resume(dir.path(), &store, &plan, Some(&cfg)).unwrap();
    t.run(Execution::Sequential).unwrap();
    assert_eq!(t.finish().0, full);
}

#[test]
fn resume_rejects_dimension_change_and_bad_state() {
    let store = common::synthetic_kg(200, 30, 2, 5);
    let plan = partition::partition_random(&store, 1, 0).unwrap();
    let mut cfg = small_config(ModelKind::ComplEx);
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(&store, &plan, cfg.clone()).unwrap();
    t.run(Execution::Sequential).unwrap();
    t.checkpoint(dir.path()).unwrap();

    let mut other = cfg.clone();
    other.dim = 13;
    assert!(matches!(
        Trainer::resume(dir.path(), &store, &plan, Some(&other)),
        Err(Error::DimMismatch { expected: 13, found: 12 })
    ));

    std::fs::write(dir.path().join(trainer::STATE_FILE), b"{ not json").unwrap();
    assert!(matches!(Trainer::resume(dir.path(), &store, &plan, None), Err(Error::Corrupt { .. })));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(Trainer::resume(empty.path(), &store, &plan, None), Err(Error::Io { .. })));
}

#[test]
fn several_workers_train_every_partition() {
    let store = common::synthetic_kg(4000, 400, 8, 6);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let plan = partition::partition_random(&store, 6, 2).unwrap();
        let mut cfg = small_config(ModelKind::DistMult);
        cfg.workers = 4;
        cfg.epochs = 3;
        cfg.batch_size = 64;
        let (table, log) = trainer::train(&store, &plan, cfg, exec).unwrap();
        assert!(table.is_finite());
        assert_eq!(log.epochs.len(), 3);
        assert!(log.epochs[2].mean_loss < log.epochs[0].mean_loss, "{exec:?}: {:?}", log.epochs);
    }
}

#[test]
fn sequential_execution_is_deterministic_with_many_workers() {
    let store = common::synthetic_kg(2000, 200, 4, 8);
    let plan = partition::partition_random(&store, 4, 3).unwrap();
    let mut cfg = small_config(ModelKind::ComplEx);
    cfg.workers = 3;
    cfg.epochs = 2;
    cfg.negative_scope = NegativeScope::Local;
    let a = trainer::train(&store, &plan, cfg.clone(), Execution::Sequential).unwrap().0;
    let b = trainer::train(&store, &plan, cfg, Execution::Sequential).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn regularisation_shrinks_entity_norms() {
    let store = common::synthetic_kg(1500, 100, 4, 9);
    let plan = partition::partition_random(&store, 1, 0).unwrap();
    let mut norms = Vec::new();
    for reg in [0.0, 0.05] {
        let mut cfg = small_config(ModelKind::DistMult);
        cfg.epochs = 15;
        cfg.regularization = reg;
        let (_, log) = trainer::train(&store, &plan, cfg, Execution::Sequential).unwrap();
        norms.push(log.epochs.last().unwrap().mean_sq_entity_norm);
        if reg > 0.0 {
            let peak = log.epochs.iter().map(|e| e.mean_sq_entity_norm).fold(0.0, f64::max);
            assert!(peak < 10.0, "norm bounded, peaked at {peak}");
        }
    }
    assert!(norms[1] < norms[0], "{norms:?}");
}

#[test]
fn semantic_plans_train_too() {
    let (store, hierarchy) = common::typed_synthetic_kg(3000, 300, 10);
    let plan = partition::partition_semantic(&store, &hierarchy, 5, partition::ClassKey::Head).unwrap();
    let mut cfg = small_config(ModelKind::TransE { norm: Norm::L1, margin: 4.0 });
    cfg.workers = 5;
    cfg.epochs = 2;
    cfg.negative_scope = NegativeScope::Local;
    let (table, _) = trainer::train(&store, &plan, cfg, Execution::Parallel).unwrap();
    assert!(table.is_finite());
}

/// Chi-square goodness of fit of replacement counts against the uniform
/// distribution over the scope minus the original entity.
fn chi_square_p(counts: &[u64], excluded: usize) -> f64 {
    let cells: Vec<u64> = counts.iter().enumerate().filter(|(i, _)| *i != excluded).map(|(_, c)| *c).collect();
    assert_eq!(counts[excluded], 0, "original entity drawn");
    let total: u64 = cells.iter().sum();
    let expected = total as f64 / cells.len() as f64;
    let stat: f64 = cells.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    1.0 - ChiSquared::new((cells.len() - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn replacements_are_uniform() {
    let n = 60;
    let t = Triple::new(3, 0, 17);
    let mut r = rng::seeded(2024);
    let (mut heads, mut tails) = (vec![0u64; n], vec![0u64; n]);
    let negs = trainer::sample_negatives(t, 100_000, SamplingScope::Global(n), &mut r).unwrap();
    for s in &negs {
        match s.corrupted_slot {
            Slot::Head => heads[s.replacement as usize] += 1,
            Slot::Tail => tails[s.replacement as usize] += 1,
        }
    }
    let head_share = heads.iter().sum::<u64>() as f64 / 1e5;
    assert!((head_share - 0.5).abs() < 3.0 * (0.25f64 / 1e5).sqrt() + 1e-3, "slot coin {head_share}");
    for (counts, excluded) in [(&heads, 3), (&tails, 17)] {
        let p = chi_square_p(counts, excluded);
        assert!(p > 0.01, "chi-square p = {p}");
    }
}

#[test]
fn local_replacements_are_uniform_over_the_roster() {
    let roster: Vec<u32> = (0..200).filter(|e| e % 7 == 2).collect();
    let t = Triple::new(roster[0], 0, roster[5]);
    let mut r = rng::seeded(77);
    let mut counts = vec![0u64; 200];
    let negs = trainer::sample_negatives(t, 100_000, SamplingScope::Local(&roster), &mut r).unwrap();
    for s in negs.iter().filter(|s| s.corrupted_slot == Slot::Tail) {
        counts[s.replacement as usize] += 1;
    }
    let in_roster: Vec<u64> = roster.iter().map(|&e| counts[e as usize]).collect();
    assert_eq!(counts.iter().sum::<u64>(), in_roster.iter().sum::<u64>());
    let p = chi_square_p(&in_roster, 5);
    assert!(p > 0.01, "chi-square p = {p}");
}

#[test]
fn init_checksum_is_stable() {
    let table = models::init_table(&ModelKind::DistMult, 50, 7, 400, 1234).unwrap();
    let checksum = table
        .entity_matrix()
        .iter()
        .chain(table.relation_matrix())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3));
    assert_eq!(checksum, 17_773_452_065_600_876_142);
}
