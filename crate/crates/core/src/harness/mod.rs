//! Active-learning cycles, repetitions and run-directory bookkeeping.
//!
//! Per repetition, cycle 0 draws `B` pool ids uniformly at random for every
//! strategy; each later cycle scores only never-selected ids with the model
//! trained at the previous cycle. After each selection the learner is
//! retrained from scratch on everything labeled so far and evaluated on the
//! whole test manifest.

mod conformance;
mod external;
mod port;
mod rundir;

pub use conformance::{run_conformance, CheckResult, ConformanceReport};
pub use external::{AdapterFactory, AdapterLearner, Request, Response};
pub use port::{BuiltinFactory, BuiltinLearner, FeatureBank, LearnerFactory, LearnerPort, PatchStore, PortError};
pub use rundir::{
    compare_csv, finish_run, prepare_run_dir, read_run_config, read_selections, read_status, replay_run, selection_path,
    RepetitionSeeds, ReplayOutcome, RunConfigFile, RunState, RunStatus, SelectionFile, CONFIG_FILE, METRICS_FILE,
    STATUS_FILE,
};

use std::collections::BTreeSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{mean_entropy, select_coreset, select_entropy, select_random, ScoreVector, SelectionError, Strategy};
use crate::data::{DatasetManifest, PatchId};
use crate::learner::LearnerConfig;
use crate::metrics::{confusion_from_probabilities, faulty_selected_fraction, ratio_to_f64, ConfusionCounts, MetricsError};
use crate::scalar::{round_count, Scalar};
use crate::seed::{derive_seed, SeedPurpose};
use crate::Fraction;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("pool and test manifests share id {0}")]
    Overlap(PatchId),
    #[error("pool exhausted: {cycles} cycles of {budget} need {needed} ids, pool has {available}")]
    PoolExhausted { cycles: usize, budget: usize, needed: usize, available: usize },
    #[error("learner failed at repetition {repetition}, cycle {cycle}: {source}")]
    Learner { repetition: usize, cycle: usize, source: PortError },
    #[error("selection failed at repetition {repetition}, cycle {cycle}: {source}")]
    Selection { repetition: usize, cycle: usize, source: SelectionError },
    #[error("metrics failed at repetition {repetition}, cycle {cycle}: {source}")]
    Metrics { repetition: usize, cycle: usize, source: MetricsError },
    #[error("missing mask for test id {0}")]
    MissingPatch(PatchId),
    #[error("run directory: {0}")]
    RunDir(String),
}

/// Learner backing a run: the built-in segmenter or an adapter command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerSpec {
    Builtin(LearnerConfig),
    External { command: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ALRunConfig {
    pub strategy: Strategy,
    pub cycles: usize,
    pub budget_fraction: f64,
    pub repetitions: usize,
    pub base_seed: u64,
    pub learner: LearnerSpec,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    1
}

impl ALRunConfig {
    pub fn new(strategy: Strategy, learner: LearnerSpec) -> Self {
        Self { strategy, cycles: 10, budget_fraction: 0.02, repetitions: 15, base_seed: 0, learner, workers: 1 }
    }

    /// Per-cycle budget `round(budget_fraction × pool_size)`.
    pub fn budget(&self, pool_size: usize) -> usize {
        round_count(self.budget_fraction * pool_size as f64)
    }

    pub fn validate(&self, pool_size: usize) -> Result<usize, HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.cycles == 0 || self.repetitions == 0 {
            return bad("cycles and repetitions must be positive".into());
        }
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return bad(format!("budget fraction {} outside (0, 1]", self.budget_fraction));
        }
        if self.cycles as f64 * self.budget_fraction > 1.0 + 1e-9 {
            return bad(format!("{} cycles × {} exceed the pool", self.cycles, self.budget_fraction));
        }
        let budget = self.budget(pool_size);
        if budget == 0 {
            return bad(format!("budget rounds to zero for a pool of {pool_size}"));
        }
        let needed = budget * self.cycles;
        if needed > pool_size {
            return Err(HarnessError::PoolExhausted { cycles: self.cycles, budget, needed, available: pool_size });
        }
        if let LearnerSpec::Builtin(cfg) = &self.learner {
            cfg.validate().map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        }
        Ok(budget)
    }

    pub fn selection_seed(&self, repetition: usize, cycle: usize) -> u64 {
        derive_seed(self.base_seed, repetition as u64, cycle as u64, SeedPurpose::Selection)
    }

    pub fn training_seed(&self, repetition: usize, cycle: usize) -> u64 {
        derive_seed(self.base_seed, repetition as u64, cycle as u64, SeedPurpose::Training)
    }
}

/// Outcome of one cycle of one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub strategy: Strategy,
    pub pi_u: Fraction,
    pub pi_t: Fraction,
    pub repetition: usize,
    pub cycle: usize,
    pub selected_ids: Vec<PatchId>,
    pub cumulative_labeled: usize,
    pub pool_size: usize,
    pub f1_defect: f64,
    pub faulty_selected_fraction: f64,
    pub wall_time: f64,
}

impl CycleRecord {
    /// Labeled share of the pool in percent.
    pub fn cumulative_pct(&self) -> f64 {
        100.0 * self.cumulative_labeled as f64 / self.pool_size as f64
    }

    /// Equality on everything except timing.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { wall_time: 0.0, ..self.clone() } == Self { wall_time: 0.0, ..other.clone() }
    }
}

/// Inputs shared by every repetition of one experiment.
pub struct Experiment<'a, T: Scalar> {
    pub pool: &'a DatasetManifest,
    pub test: &'a DatasetManifest,
    pub store: &'a PatchStore,
    pub factory: &'a dyn LearnerFactory<T>,
}

fn check_disjoint(pool: &DatasetManifest, test: &DatasetManifest) -> Result<(), HarnessError> {
    match test.entries().iter().find(|e| pool.contains(e.id)) {
        Some(e) => Err(HarnessError::Overlap(e.id)),
        None => Ok(()),
    }
}

/// F1 of the defect class over the whole test manifest.
pub fn evaluate_f1<T: Scalar>(
    learner: &mut dyn LearnerPort<T>,
    test: &DatasetManifest,
    store: &PatchStore,
) -> Result<Result<f64, MetricsError>, PortError> {
    let ids = test.ids();
    let maps = learner.predict(&ids)?;
    let mut total = ConfusionCounts::default();
    for (id, map) in ids.iter().zip(&maps) {
        let truth = &store.get(*id).ok_or(PortError::UnknownId(*id))?.mask;
        match confusion_from_probabilities(map, truth) {
            Ok(c) => total = total + c,
            Err(e) => return Ok(Err(e)),
        }
    }
    Ok(Ok(total.f1()))
}

/// Retrains on `labeled` and returns test F1 and the faulty share of `chosen`.
pub(crate) fn train_and_score<T: Scalar>(
    exp: &Experiment<'_, T>,
    learner: &mut dyn LearnerPort<T>,
    config: &ALRunConfig,
    repetition: usize,
    cycle: usize,
    labeled: &[PatchId],
    chosen: &[PatchId],
) -> Result<(f64, f64), HarnessError> {
    let learner_err = |source| HarnessError::Learner { repetition, cycle, source };
    let metrics_err = |source| HarnessError::Metrics { repetition, cycle, source };
    learner.train(labeled, config.training_seed(repetition, cycle)).map_err(learner_err)?;
    let f1 = evaluate_f1(learner, exp.test, exp.store).map_err(learner_err)?.map_err(metrics_err)?;
    let faulty = faulty_selected_fraction(chosen, exp.pool).map_err(metrics_err)?;
    Ok((f1, ratio_to_f64(faulty)))
}

/// Runs the cycles of one repetition.
pub fn run_repetition<T: Scalar>(
    exp: &Experiment<'_, T>,
    config: &ALRunConfig,
    repetition: usize,
) -> Result<Vec<CycleRecord>, HarnessError> {
    check_disjoint(exp.pool, exp.test)?;
    let budget = config.validate(exp.pool.len())?;
    let learner_err = |cycle: usize| move |source| HarnessError::Learner { repetition, cycle, source };
    let mut learner = exp.factory.create(repetition).map_err(learner_err(0))?;
    let pi_u = exp.pool.realized_faulty_fraction();
    let pi_t = exp.test.realized_faulty_fraction();

    let mut remaining: BTreeSet<PatchId> = exp.pool.ids().into_iter().collect();
    let mut labeled: Vec<PatchId> = Vec::with_capacity(budget * config.cycles);
    let mut records = Vec::with_capacity(config.cycles);

    for cycle in 0..config.cycles {
        let started = Instant::now();
        let candidates: Vec<PatchId> = remaining.iter().copied().collect();
        let sel_err = |source| HarnessError::Selection { repetition, cycle, source };
        let seed = config.selection_seed(repetition, cycle);
        let strategy = if cycle == 0 { Strategy::Random } else { config.strategy };
        let selection = match strategy {
            Strategy::Random => select_random(&candidates, budget, seed).map_err(sel_err)?,
            Strategy::Entropy => {
                let maps = learner.predict(&candidates).map_err(learner_err(cycle))?;
                let scores = ScoreVector::new(candidates.iter().zip(&maps).map(|(&id, m)| (id, mean_entropy(m))).collect())
                    .map_err(sel_err)?;
                select_entropy(&scores, budget).map_err(sel_err)?
            }
            Strategy::Coreset => {
                let centers = learner.embed(&labeled).map_err(learner_err(cycle))?;
                let emb = learner.embed(&candidates).map_err(learner_err(cycle))?;
                let cands: Vec<_> = candidates.iter().copied().zip(emb).collect();
                select_coreset(&centers, &cands, budget).map_err(sel_err)?
            }
        };
        for id in &selection.chosen_ids {
            remaining.remove(id);
        }
        labeled.extend_from_slice(&selection.chosen_ids);

        let (f1, faulty) = train_and_score(exp, learner.as_mut(), config, repetition, cycle, &labeled, &selection.chosen_ids)?;
        let record = CycleRecord {
            strategy: config.strategy,
            pi_u,
            pi_t,
            repetition,
            cycle,
            selected_ids: selection.chosen_ids,
            cumulative_labeled: labeled.len(),
            pool_size: exp.pool.len(),
            f1_defect: f1,
            faulty_selected_fraction: faulty,
            wall_time: started.elapsed().as_secs_f64(),
        };
        tracing::debug!(
            strategy = %config.strategy,
            repetition,
            cycle,
            f1 = record.f1_defect,
            faulty = record.faulty_selected_fraction,
            "cycle done"
        );
        records.push(record);
    }
    Ok(records)
}

/// Outcome of [`run_experiment`]: records of the repetitions that finished,
/// sorted by `(repetition, cycle)`, and the first failure if any.
#[derive(Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<CycleRecord>,
    pub failure: Option<HarnessError>,
}

impl ExperimentOutcome {
    pub fn into_result(self) -> Result<Vec<CycleRecord>, HarnessError> {
        match self.failure {
            None => Ok(self.records),
            Some(e) => Err(e),
        }
    }
}

/// Runs every repetition, in parallel up to `config.workers`.
pub fn run_experiment<T: Scalar>(exp: &Experiment<'_, T>, config: &ALRunConfig) -> ExperimentOutcome {
    if let Err(e) = check_disjoint(exp.pool, exp.test).and_then(|_| config.validate(exp.pool.len())) {
        return ExperimentOutcome { records: Vec::new(), failure: Some(e) };
    }
    let reps: Vec<usize> = (0..config.repetitions).collect();
    merge(per_repetition(config.workers, &reps, |r| run_repetition(exp, config, r)))
}

/// Applies `f` to each repetition, on a dedicated pool of `workers` threads
/// when more than one is requested. Results keep the order of `reps`.
pub(crate) fn per_repetition<F>(workers: usize, reps: &[usize], f: F) -> Vec<Result<Vec<CycleRecord>, HarnessError>>
where
    F: Fn(usize) -> Result<Vec<CycleRecord>, HarnessError> + Sync,
{
    if workers <= 1 {
        return reps.iter().map(|&r| f(r)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| reps.par_iter().map(|&r| f(r)).collect()),
        Err(e) => vec![Err(HarnessError::InvalidConfig(e.to_string()))],
    }
}

pub(crate) fn merge(results: Vec<Result<Vec<CycleRecord>, HarnessError>>) -> ExperimentOutcome {
    let mut records = Vec::new();
    let mut failure = None;
    for r in results {
        match r {
            Ok(recs) => records.extend(recs),
            Err(e) => {
                if failure.is_none() {
                    failure = Some(e);
                }
            }
        }
    }
    records.sort_by_key(|r| (r.repetition, r.cycle));
    ExperimentOutcome { records, failure }
}
