//! The `run` and `replay` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use albench_core::acquisition::Strategy;
use albench_core::data::{load_manifest, save_manifest, DatasetManifest, Role};
use albench_core::harness::{
    compare_csv, finish_run, prepare_run_dir, read_run_config, replay_run, run_experiment, AdapterFactory,
    ALRunConfig, BuiltinFactory, CycleRecord, Experiment, HarnessError, LearnerFactory, LearnerSpec, PatchStore,
    ReplayOutcome, RunConfigFile, CONFIG_FILE,
};
use albench_core::learner::LearnerConfig;
use albench_core::report::{fmt_sig6, metrics_csv_string, uniqueness_csv_string, uniqueness_table};
use albench_core::synth::{build_disjoint_pools, PoolSpec};
use albench_core::metrics::ratio_to_f64;
use clap::Args;
use serde::Serialize;

use crate::{config_err, pool_seeds, write_provenance, Cli, CliError};

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    /// Pool manifest.
    #[arg(long, conflicts_with = "source")]
    pub pool: Option<PathBuf>,
    /// Test manifest.
    #[arg(long, conflicts_with = "source")]
    pub test: Option<PathBuf>,
    /// Patch source for building pools inline; requires --grid.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Comma-separated `pi_u:pi_t` pairs, e.g. `0.5:0.5,0.5:0.05`.
    #[arg(long, requires = "source")]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 600)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 400)]
    pub test_size: usize,
    /// random, entropy, coreset or all.
    #[arg(long, default_value = "all")]
    pub strategy: String,
    #[arg(long, default_value_t = 15)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub cycles: usize,
    /// Per-cycle budget as a fraction of the pool.
    #[arg(long, default_value_t = 0.02)]
    pub budget: f64,
    /// Shell command starting an external learner adapter.
    #[arg(long)]
    pub model_cmd: Option<String>,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    /// Box-filter window sizes of the built-in learner.
    #[arg(long, value_delimiter = ',', default_value = "3,7,15")]
    pub scales: Vec<usize>,
    /// Dice smoothing constant.
    #[arg(long, default_value_t = 1.0)]
    pub smoothing: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    /// Output directory of an earlier `run`, or one of its sub-runs.
    pub run_dir: PathBuf,
}

impl RunArgs {
    fn strategies(&self) -> Result<Vec<Strategy>, CliError> {
        if self.strategy == "all" {
            return Ok(Strategy::ALL.to_vec());
        }
        self.strategy.parse().map(|s| vec![s]).map_err(|e| config_err(format!("--strategy: {e}")))
    }

    fn learner_config(&self) -> LearnerConfig {
        LearnerConfig {
            scales: self.scales.clone(),
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            smoothing: self.smoothing,
            ..LearnerConfig::default()
        }
    }

    fn grid(&self) -> Result<Vec<(f64, f64)>, CliError> {
        let grid = self.grid.as_deref().ok_or_else(|| config_err("--grid is required with --source"))?;
        grid.split(',')
            .map(|pair| {
                let bad = || config_err(format!("--grid: cannot parse {pair:?}, expected pi_u:pi_t"));
                let (u, t) = pair.trim().split_once(':').ok_or_else(bad)?;
                Ok((u.parse().map_err(|_| bad())?, t.parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

/// One (pool, test) pair to run every strategy on.
struct DataPair {
    pool: DatasetManifest,
    test: DatasetManifest,
}

fn load_pairs(cli: &Cli, args: &RunArgs) -> Result<(Vec<DataPair>, serde_json::Value), CliError> {
    if let Some(source) = &args.source {
        let grid = args.grid()?;
        let source_manifest = load_manifest(source).map_err(|e| config_err(format!("--source: {e}")))?;
        let mut pairs = Vec::new();
        let mut specs = Vec::new();
        for (i, (pi_u, pi_t)) in grid.into_iter().enumerate() {
            let (ps, ts) = pool_seeds(cli.seed, i);
            let pool_spec = PoolSpec { target_faulty_fraction: pi_u, size: args.pool_size, seed: ps, role: Role::Pool };
            let test_spec = PoolSpec { target_faulty_fraction: pi_t, size: args.test_size, seed: ts, role: Role::Test };
            let (pool, test) = build_disjoint_pools(&source_manifest, &pool_spec, &test_spec)
                .map_err(|e| config_err(format!("--grid entry {pi_u}:{pi_t}: {e}")))?;
            let dir = cli.out.join("pools").join(format!("{i}"));
            save_manifest(&pool, &dir.join("pool.json")).map_err(config_err)?;
            save_manifest(&test, &dir.join("test.json")).map_err(config_err)?;
            specs.push(serde_json::json!({ "pool": pool_spec, "test": test_spec }));
            pairs.push(DataPair { pool, test });
        }
        return Ok((pairs, serde_json::Value::Array(specs)));
    }
    let pool_path = args.pool.as_ref().ok_or_else(|| config_err("missing pool manifest: pass --pool <path>"))?;
    let test_path = args.test.as_ref().ok_or_else(|| config_err("missing test manifest: pass --test <path>"))?;
    let pool = load_manifest(pool_path).map_err(|e| config_err(format!("--pool: {e}")))?;
    let test = load_manifest(test_path).map_err(|e| config_err(format!("--test: {e}")))?.with_role(Role::Test);
    Ok((vec![DataPair { pool, test }], serde_json::Value::Null))
}

fn run_name(strategy: Strategy, pool: &DatasetManifest, test: &DatasetManifest) -> String {
    let label = |f| {
        let v: f64 = ratio_to_f64(f);
        format!("{}", (v * 1e6).round() / 1e6)
    };
    format!("{strategy}_pu{}_pt{}", label(pool.realized_faulty_fraction()), label(test.realized_faulty_fraction()))
}

fn harness_err(e: HarnessError) -> CliError {
    match e {
        HarnessError::Learner { .. } | HarnessError::Selection { .. } | HarnessError::Metrics { .. } => {
            CliError::Learner(e.to_string())
        }
        other => config_err(other),
    }
}

fn factory_for(
    spec: &LearnerSpec,
    store: &Arc<PatchStore>,
    builtin: &mut Option<Arc<BuiltinFactory<f64>>>,
    run_dir: &Path,
    config: &RunConfigFile,
    adapter_work: PathBuf,
) -> Result<Box<dyn LearnerFactory<f64>>, CliError> {
    struct Shared(Arc<BuiltinFactory<f64>>);
    impl LearnerFactory<f64> for Shared {
        fn create(
            &self,
            repetition: usize,
        ) -> Result<Box<dyn albench_core::harness::LearnerPort<f64>>, albench_core::harness::PortError> {
            self.0.create(repetition)
        }
    }
    match spec {
        LearnerSpec::Builtin(cfg) => {
            if builtin.is_none() {
                let f = BuiltinFactory::new(cfg.clone(), Arc::clone(store)).map_err(config_err)?;
                *builtin = Some(Arc::new(f));
            }
            Ok(Box::new(Shared(Arc::clone(builtin.as_ref().expect("built above")))))
        }
        LearnerSpec::External { command } => Ok(Box::new(AdapterFactory {
            command: command.clone(),
            manifest_path: run_dir.join(&config.adapter_manifest),
            work_dir: adapter_work,
            prob_clamp: LearnerConfig::default().prob_clamp,
        })),
    }
}

pub fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<(), CliError> {
    let strategies = args.strategies()?;
    let learner = match &args.model_cmd {
        Some(cmd) => LearnerSpec::External { command: cmd.clone() },
        None => {
            let cfg = args.learner_config();
            cfg.validate().map_err(|e| config_err(format!("learner flags: {e}")))?;
            LearnerSpec::Builtin(cfg)
        }
    };
    let (pairs, pool_specs) = load_pairs(cli, args)?;
    let runs: Vec<ALRunConfig> = strategies
        .iter()
        .map(|&s| ALRunConfig {
            strategy: s,
            cycles: args.cycles,
            budget_fraction: args.budget,
            repetitions: args.reps,
            base_seed: cli.seed,
            learner: learner.clone(),
            workers: cli.workers.max(1),
        })
        .collect();
    for pair in &pairs {
        runs[0].validate(pair.pool.len()).map_err(|e| config_err(format!("--budget/--cycles/--reps: {e}")))?;
    }
    write_provenance(cli, serde_json::json!({ "runs": runs, "pools": pool_specs }))?;

    let mut all_records: Vec<CycleRecord> = Vec::new();
    let mut failure: Option<CliError> = None;
    for pair in &pairs {
        let store = Arc::new(
            PatchStore::load(&[&pair.pool, &pair.test]).map_err(|e| config_err(format!("reading patches: {e}")))?,
        );
        let mut builtin = None;
        for run in &runs {
            let name = run_name(run.strategy, &pair.pool, &pair.test);
            let dir = cli.out.join("runs").join(&name);
            let file = prepare_run_dir(&dir, run, &pair.pool, &pair.test).map_err(harness_err)?;
            let factory = factory_for(&run.learner, &store, &mut builtin, &dir, &file, dir.join("adapter"))?;
            let exp = Experiment { pool: &pair.pool, test: &pair.test, store: &store, factory: factory.as_ref() };
            tracing::info!(run = %name, "starting");
            let outcome = run_experiment(&exp, run);
            finish_run(&dir, &file, &outcome.records, outcome.failure.as_ref()).map_err(harness_err)?;
            let finals: Vec<f64> =
                outcome.records.iter().filter(|r| r.cycle + 1 == run.cycles).map(|r| r.f1_defect).collect();
            if !finals.is_empty() {
                let mean = finals.iter().sum::<f64>() / finals.len() as f64;
                println!("{name}: {} records, final-cycle mean F1 {}", outcome.records.len(), fmt_sig6(mean));
            }
            all_records.extend(outcome.records);
            if let Some(e) = outcome.failure {
                failure = Some(harness_err(e));
                break;
            }
        }
        if failure.is_some() {
            break;
        }
    }
    write_tables(&cli.out, &all_records)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn write_tables(out: &Path, records: &[CycleRecord]) -> Result<(), CliError> {
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    };
    write("metrics.csv", metrics_csv_string(records))?;
    let table = uniqueness_table(records).map_err(config_err)?;
    write("uniqueness.csv", uniqueness_csv_string(&table))
}

fn sub_runs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if dir.join(CONFIG_FILE).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let runs = dir.join("runs");
    let entries = fs::read_dir(&runs).map_err(|e| config_err(format!("{}: no run config and {e}", dir.display())))?;
    let mut found: Vec<PathBuf> =
        entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join(CONFIG_FILE).exists()).collect();
    found.sort();
    if found.is_empty() {
        return Err(config_err(format!("{} holds no runs", dir.display())));
    }
    Ok(found)
}

pub fn cmd_replay(cli: &Cli, args: &ReplayArgs) -> Result<(), CliError> {
    let dirs = sub_runs(&args.run_dir)?;
    write_provenance(cli, serde_json::json!({ "replay": args.run_dir, "runs": dirs }))?;
    let mut all_records = Vec::new();
    for dir in &dirs {
        let config = read_run_config(dir).map_err(config_err)?;
        let (pool, test) = config.load_manifests(dir).map_err(config_err)?;
        let store = Arc::new(PatchStore::load(&[&pool, &test]).map_err(config_err)?);
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut builtin = None;
        let factory =
            factory_for(&config.run.learner, &store, &mut builtin, dir, &config, cli.out.join("replay").join(&name))?;
        let exp = Experiment { pool: &pool, test: &test, store: &store, factory: factory.as_ref() };
        let mut run = config.run.clone();
        run.workers = cli.workers.max(1);
        let config = RunConfigFile { run, ..config };
        let (outcome, records) = replay_run(dir, &config, &exp).map_err(harness_err)?;
        match outcome {
            ReplayOutcome::Consistent { records } => println!("{}: consistent ({records} records)", dir.display()),
            ReplayOutcome::Mismatch { line, expected, found } => {
                return Err(CliError::Mismatch(format!(
                    "{}: metrics.csv line {line} differs\n  stored:     {expected}\n  recomputed: {found}",
                    dir.display()
                )));
            }
        }
        all_records.extend(records);
    }
    if dirs.len() > 1 || dirs[0] != args.run_dir {
        for (name, found) in [
            ("metrics.csv", metrics_csv_string(&all_records)),
            ("uniqueness.csv", uniqueness_csv_string(&uniqueness_table(&all_records).map_err(config_err)?)),
        ] {
            let path = args.run_dir.join(name);
            let Ok(stored) = fs::read_to_string(&path) else { continue };
            if let ReplayOutcome::Mismatch { line, expected, found } = compare_csv(&stored, &found) {
                return Err(CliError::Mismatch(format!(
                    "{}: line {line} differs\n  stored:     {expected}\n  recomputed: {found}",
                    path.display()
                )));
            }
            println!("{}: consistent", path.display());
        }
    }
    Ok(())
}
