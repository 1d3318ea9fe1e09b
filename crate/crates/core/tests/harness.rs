use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use albench_core::acquisition::Strategy;
use albench_core::data::{DatasetManifest, ManifestEntry, PatchId, PatchRecord, Role};
use albench_core::harness::{
    finish_run, prepare_run_dir, read_run_config, replay_run, run_experiment, run_repetition, selection_path,
    ALRunConfig, BuiltinFactory, Experiment, HarnessError, LearnerFactory, LearnerPort, LearnerSpec, PatchStore,
    PortError, ReplayOutcome,
};
use albench_core::learner::{LearnerConfig, ProbabilityMap};
use albench_core::seed::splitmix64;
use albench_core::synth::{build_disjoint_pools, generate_synthetic, patchify, PoolSpec, SynthConfig};

/// Deterministic stand-in learner: outputs depend on the id and on how
/// many ids it was trained on.
struct FakeLearner {
    trained: Option<usize>,
    fail_at: Option<usize>,
    trainings: usize,
}

impl LearnerPort<f64> for FakeLearner {
    fn train(&mut self, labeled: &[PatchId], _seed: u64) -> Result<(), PortError> {
        if self.fail_at == Some(self.trainings) {
            return Err(PortError::Adapter("boom".into()));
        }
        self.trainings += 1;
        self.trained = Some(labeled.len());
        Ok(())
    }

    fn predict(&mut self, ids: &[PatchId]) -> Result<Vec<ProbabilityMap<f64>>, PortError> {
        let n = self.trained.ok_or(PortError::NotTrained)?;
        ids.iter()
            .map(|&id| {
                let h = splitmix64(id ^ (n as u64) << 32);
                let p = (h % 1000) as f64 / 1000.0;
                Ok(ProbabilityMap::clamped(2, 2, vec![p, 1.0 - p, p, 0.5], 1e-7)?)
            })
            .collect()
    }

    fn embed(&mut self, ids: &[PatchId]) -> Result<Vec<Vec<f64>>, PortError> {
        self.trained.ok_or(PortError::NotTrained)?;
        Ok(ids.iter().map(|&id| vec![(splitmix64(id) % 997) as f64, (splitmix64(id + 7) % 991) as f64]).collect())
    }
}

struct FakeFactory {
    fail: Option<(usize, usize)>,
}

impl LearnerFactory<f64> for FakeFactory {
    fn create(&self, repetition: usize) -> Result<Box<dyn LearnerPort<f64>>, PortError> {
        let fail_at = self.fail.filter(|f| f.0 == repetition).map(|f| f.1);
        Ok(Box::new(FakeLearner { trained: None, fail_at, trainings: 0 }))
    }
}

/// In-memory manifests with ids `0..pool` and `pool..pool+test`; every
/// fifth id is faulty.
fn fake_data(pool: usize, test: usize) -> (DatasetManifest, DatasetManifest, PatchStore) {
    let entry = |id: u64| ManifestEntry {
        id,
        image: PathBuf::from(format!("/nonexistent/{id}.png")),
        mask: PathBuf::from(format!("/nonexistent/{id}_m.png")),
        faulty: id.is_multiple_of(5),
    };
    let p = DatasetManifest::new(Role::Pool, (0..pool as u64).map(entry).collect()).unwrap();
    let t = DatasetManifest::new(Role::Test, (pool as u64..(pool + test) as u64).map(entry).collect()).unwrap();
    let records = (0..(pool + test) as u64).map(|id| {
        let m = u8::from(id % 5 == 0);
        PatchRecord::new(id, 1, 2, 2, vec![0.5; 4], vec![m, 0, 0, 0]).unwrap()
    });
    (p, t, PatchStore::from_records(records))
}

fn config(strategy: Strategy, cycles: usize, fraction: f64, reps: usize) -> ALRunConfig {
    ALRunConfig {
        cycles,
        budget_fraction: fraction,
        repetitions: reps,
        base_seed: 11,
        ..ALRunConfig::new(strategy, LearnerSpec::External { command: "unused".into() })
    }
}

#[test]
fn budget_and_cumulative_counts_on_4300_pool() {
    let (pool, test, store) = fake_data(4300, 50);
    let factory = FakeFactory { fail: None };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    for strategy in Strategy::ALL {
        let cfg = config(strategy, 10, 0.02, 2);
        let records = run_experiment(&exp, &cfg).into_result().unwrap();
        assert_eq!(records.len(), 20);
        for rep in 0..2 {
            let mut seen = BTreeSet::new();
            for (j, r) in records.iter().filter(|r| r.repetition == rep).enumerate() {
                assert_eq!(r.cycle, j);
                assert_eq!(r.selected_ids.len(), 86);
                assert_eq!(r.cumulative_labeled, 86 * (j + 1));
                assert!((r.cumulative_pct() - 2.0 * (j + 1) as f64).abs() < 1e-9);
                for id in &r.selected_ids {
                    assert!(seen.insert(*id), "{strategy}: id {id} selected twice");
                    assert!(pool.contains(*id) && !test.contains(*id));
                }
            }
        }
    }
}

#[test]
fn cycle_zero_is_shared_by_all_strategies() {
    let (pool, test, store) = fake_data(300, 20);
    let factory = FakeFactory { fail: None };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    let firsts: Vec<Vec<Vec<PatchId>>> = Strategy::ALL
        .iter()
        .map(|&s| {
            let recs = run_experiment(&exp, &config(s, 3, 0.05, 3)).into_result().unwrap();
            recs.into_iter().filter(|r| r.cycle == 0).map(|r| r.selected_ids).collect()
        })
        .collect();
    assert_eq!(firsts[0], firsts[1]);
    assert_eq!(firsts[0], firsts[2]);
    assert_ne!(firsts[0][0], firsts[0][1], "repetitions should draw independently");
}

#[test]
fn parallel_matches_serial() {
    let (pool, test, store) = fake_data(400, 20);
    let factory = FakeFactory { fail: None };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    for strategy in Strategy::ALL {
        let serial = run_experiment(&exp, &config(strategy, 4, 0.05, 6)).into_result().unwrap();
        let mut cfg = config(strategy, 4, 0.05, 6);
        cfg.workers = 4;
        let parallel = run_experiment(&exp, &cfg).into_result().unwrap();
        assert_eq!(serial.len(), parallel.len());
        assert!(serial.iter().zip(&parallel).all(|(a, b)| a.same_outcome(b)));
    }
}

#[test]
fn single_cycle_run() {
    let (pool, test, store) = fake_data(100, 10);
    let factory = FakeFactory { fail: None };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    let recs = run_experiment(&exp, &config(Strategy::Coreset, 1, 0.1, 4)).into_result().unwrap();
    assert_eq!(recs.len(), 4);
    assert!(recs.iter().all(|r| r.cycle == 0 && r.selected_ids.len() == 10));
}

#[test]
fn exhausted_pool_is_rejected() {
    let (pool, test, store) = fake_data(10, 5);
    let factory = FakeFactory { fail: None };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    let err = run_repetition(&exp, &config(Strategy::Random, 6, 0.15, 1), 0).unwrap_err();
    assert!(matches!(err, HarnessError::PoolExhausted { budget: 2, needed: 12, available: 10, .. }), "{err}");
}

#[test]
fn overlapping_manifests_are_rejected() {
    let (pool, _, store) = fake_data(50, 5);
    let test = pool.subset(&[3, 4]).unwrap().with_role(Role::Test);
    let factory = FakeFactory { fail: None };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    let err = run_experiment(&exp, &config(Strategy::Random, 2, 0.1, 1)).into_result().unwrap_err();
    assert!(matches!(err, HarnessError::Overlap(3)));
}

#[test]
fn learner_failure_names_repetition_and_cycle() {
    let (pool, test, store) = fake_data(100, 10);
    let factory = FakeFactory { fail: Some((1, 2)) };
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    let outcome = run_experiment(&exp, &config(Strategy::Entropy, 4, 0.05, 3));
    assert_eq!(outcome.records.len(), 8, "repetitions 0 and 2 still complete");
    match outcome.failure {
        Some(HarnessError::Learner { repetition: 1, cycle: 2, .. }) => {}
        other => panic!("{other:?}"),
    }
}

/// Small real dataset: 24 synthetic 48×48 images cut into 16×16 patches.
fn synthetic_pools(dir: &std::path::Path) -> (DatasetManifest, DatasetManifest) {
    let cfg = SynthConfig { n_images: 24, height: 48, width: 48, seed: 5, ..SynthConfig::default() };
    let source = generate_synthetic(&cfg, &dir.join("source")).unwrap();
    let patches = patchify(&source, 16, 16, &dir.join("patches")).unwrap();
    let pool = PoolSpec { target_faulty_fraction: 0.2, size: 80, seed: 1, role: Role::Pool };
    let test = PoolSpec { target_faulty_fraction: 0.2, size: 40, seed: 2, role: Role::Test };
    build_disjoint_pools(&patches, &pool, &test).unwrap()
}

#[test]
fn run_directory_replays_and_detects_tampering() {
    let tmp = tempfile::tempdir().unwrap();
    let (pool, test) = synthetic_pools(tmp.path());
    let store = Arc::new(PatchStore::load(&[&pool, &test]).unwrap());
    let lc = LearnerConfig { epochs: 10, scales: vec![3, 7], ..LearnerConfig::default() };
    let factory = BuiltinFactory::<f64>::new(lc.clone(), Arc::clone(&store)).unwrap();
    let exp = Experiment { pool: &pool, test: &test, store: &store, factory: &factory };
    let mut run = ALRunConfig {
        cycles: 3,
        budget_fraction: 0.1,
        repetitions: 2,
        base_seed: 3,
        ..ALRunConfig::new(Strategy::Coreset, LearnerSpec::Builtin(lc))
    };
    run.workers = 2;

    let dir = tmp.path().join("run");
    let file = prepare_run_dir(&dir, &run, &pool, &test).unwrap();
    assert_eq!(file.budget, 8);
    let records = run_experiment(&exp, &run).into_result().unwrap();
    finish_run(&dir, &file, &records, None).unwrap();

    let loaded = read_run_config(&dir).unwrap();
    assert_eq!(loaded, file);
    let (p2, t2) = loaded.load_manifests(&dir).unwrap();
    assert_eq!((p2.ids(), t2.ids()), (pool.ids(), test.ids()));
    assert_eq!(replay_run(&dir, &loaded, &exp).unwrap().0, ReplayOutcome::Consistent { records: 6 });

    let metrics = dir.join("metrics.csv");
    let original = std::fs::read_to_string(&metrics).unwrap();
    let mut lines: Vec<String> = original.lines().map(String::from).collect();
    let last = lines[3].pop().unwrap();
    lines[3].push(if last == '1' { '2' } else { '1' });
    std::fs::write(&metrics, lines.join("\n") + "\n").unwrap();
    match replay_run(&dir, &loaded, &exp).unwrap().0 {
        ReplayOutcome::Mismatch { line, .. } => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }

    std::fs::write(&metrics, &original).unwrap();
    std::fs::remove_file(selection_path(&dir, 1, 2)).unwrap();
    assert!(matches!(replay_run(&dir, &loaded, &exp), Err(HarnessError::RunDir(_))));
}
