//! Run directory layout:
//!
//! ```text
//! config.json                  run config, budget, seeds, manifest paths
//! pool.json, test.json         copies of the manifests used
//! adapter_manifest.json        pool ∪ test, handed to external learners
//! selections/rep{r}_cycle{j}.json
//! metrics.csv
//! status.json
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{merge, per_repetition, train_and_score, ALRunConfig, CycleRecord, Experiment, HarnessError};
use crate::acquisition::Strategy;
use crate::data::{load_manifest, save_manifest, DatasetManifest, PatchId, Role};
use crate::report::{metrics_csv_string, parse_metrics_csv};
use crate::scalar::Scalar;
use crate::Fraction;

pub const CONFIG_FILE: &str = "config.json";
pub const STATUS_FILE: &str = "status.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SELECTIONS_DIR: &str = "selections";

/// Seeds used by one repetition, indexed by cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionSeeds {
    pub repetition: usize,
    pub selection: Vec<u64>,
    pub training: Vec<u64>,
}

/// Contents of `config.json`. Manifest paths are relative to the run dir.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfigFile {
    pub run: ALRunConfig,
    pub budget: usize,
    pub pool_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub adapter_manifest: PathBuf,
    pub pool_size: usize,
    pub test_size: usize,
    pub pi_u: Fraction,
    pub pi_t: Fraction,
    pub seeds: Vec<RepetitionSeeds>,
}

impl RunConfigFile {
    /// Loads the pool and test manifests referenced by this config.
    pub fn load_manifests(&self, dir: &Path) -> Result<(DatasetManifest, DatasetManifest), HarnessError> {
        let load = |p: &Path| load_manifest(&dir.join(p)).map_err(|e| HarnessError::RunDir(e.to_string()));
        Ok((load(&self.pool_manifest)?, load(&self.test_manifest)?.with_role(Role::Test)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Complete,
    Incomplete,
}

/// Contents of `status.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub state: RunState,
    pub completed_repetitions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Contents of one `selections/rep{r}_cycle{j}.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionFile {
    pub repetition: usize,
    pub cycle: usize,
    pub strategy: Strategy,
    /// Rule that actually picked the ids; cycle 0 is always random.
    pub selected_by: Strategy,
    pub selected_ids: Vec<PatchId>,
}

/// Result of [`replay_run`]. `line` is 1-based in `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOutcome {
    Consistent { records: usize },
    Mismatch { line: usize, expected: String, found: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::RunDir(format!("{}: {e}", path.display()))
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn selection_path(dir: &Path, repetition: usize, cycle: usize) -> PathBuf {
    dir.join(SELECTIONS_DIR).join(format!("rep{repetition}_cycle{cycle}.json"))
}

/// Creates the run directory, copies the manifests into it and writes
/// `config.json` plus an `incomplete` status.
pub fn prepare_run_dir(
    dir: &Path,
    run: &ALRunConfig,
    pool: &DatasetManifest,
    test: &DatasetManifest,
) -> Result<RunConfigFile, HarnessError> {
    let budget = run.validate(pool.len())?;
    fs::create_dir_all(dir.join(SELECTIONS_DIR)).map_err(|e| io_err(dir, e))?;
    let save = |m: &DatasetManifest, name: &str| {
        save_manifest(m, &dir.join(name)).map_err(|e| HarnessError::RunDir(e.to_string()))
    };
    save(pool, "pool.json")?;
    save(test, "test.json")?;
    let union = pool.union(test, Role::Pool).map_err(|e| HarnessError::RunDir(e.to_string()))?;
    save(&union, "adapter_manifest.json")?;
    let seeds = (0..run.repetitions)
        .map(|r| RepetitionSeeds {
            repetition: r,
            selection: (0..run.cycles).map(|j| run.selection_seed(r, j)).collect(),
            training: (0..run.cycles).map(|j| run.training_seed(r, j)).collect(),
        })
        .collect();
    let file = RunConfigFile {
        run: run.clone(),
        budget,
        pool_manifest: "pool.json".into(),
        test_manifest: "test.json".into(),
        adapter_manifest: "adapter_manifest.json".into(),
        pool_size: pool.len(),
        test_size: test.len(),
        pi_u: pool.realized_faulty_fraction(),
        pi_t: test.realized_faulty_fraction(),
        seeds,
    };
    write_json(&dir.join(CONFIG_FILE), &file)?;
    write_json(
        &dir.join(STATUS_FILE),
        &RunStatus { state: RunState::Incomplete, completed_repetitions: Vec::new(), error: None },
    )?;
    Ok(file)
}

/// Persists selections, `metrics.csv` and the final status. Records are
/// those of completed repetitions; `failure` marks the run incomplete.
pub fn finish_run(
    dir: &Path,
    config: &RunConfigFile,
    records: &[CycleRecord],
    failure: Option<&HarnessError>,
) -> Result<RunStatus, HarnessError> {
    fs::create_dir_all(dir.join(SELECTIONS_DIR)).map_err(|e| io_err(dir, e))?;
    for r in records {
        let file = SelectionFile {
            repetition: r.repetition,
            cycle: r.cycle,
            strategy: r.strategy,
            selected_by: if r.cycle == 0 { Strategy::Random } else { r.strategy },
            selected_ids: r.selected_ids.clone(),
        };
        write_json(&selection_path(dir, r.repetition, r.cycle), &file)?;
    }
    let path = dir.join(METRICS_FILE);
    fs::write(&path, metrics_csv_string(records)).map_err(|e| io_err(&path, e))?;
    let completed: BTreeSet<usize> = records.iter().map(|r| r.repetition).collect();
    let state = if failure.is_none() && completed.len() == config.run.repetitions {
        RunState::Complete
    } else {
        RunState::Incomplete
    };
    let status = RunStatus {
        state,
        completed_repetitions: completed.into_iter().collect(),
        error: failure.map(|e| e.to_string()),
    };
    write_json(&dir.join(STATUS_FILE), &status)?;
    Ok(status)
}

pub fn read_run_config(dir: &Path) -> Result<RunConfigFile, HarnessError> {
    read_json(&dir.join(CONFIG_FILE))
}

pub fn read_status(dir: &Path) -> Result<RunStatus, HarnessError> {
    read_json(&dir.join(STATUS_FILE))
}

pub fn read_selections(dir: &Path, repetition: usize, cycle: usize) -> Result<SelectionFile, HarnessError> {
    let path = selection_path(dir, repetition, cycle);
    let file: SelectionFile = read_json(&path)?;
    if file.repetition != repetition || file.cycle != cycle {
        return Err(io_err(&path, format!("holds repetition {} cycle {}", file.repetition, file.cycle)));
    }
    Ok(file)
}

/// Retrains from the stored selections of every completed repetition,
/// rebuilds `metrics.csv` and compares it with the stored one byte for
/// byte. `exp` must be built from the manifests named in `config`.
/// Returns the comparison and the recomputed records.
pub fn replay_run<T: Scalar>(
    dir: &Path,
    config: &RunConfigFile,
    exp: &Experiment<'_, T>,
) -> Result<(ReplayOutcome, Vec<CycleRecord>), HarnessError> {
    let status = read_status(dir)?;
    let stored_path = dir.join(METRICS_FILE);
    let stored = fs::read_to_string(&stored_path).map_err(|e| io_err(&stored_path, e))?;
    let reps = match status.state {
        RunState::Complete => (0..config.run.repetitions).collect(),
        RunState::Incomplete => status.completed_repetitions.clone(),
    };
    // All selections are read up front so a missing file is reported
    // before any training happens.
    let mut selections = Vec::with_capacity(reps.len());
    for &r in &reps {
        let per_cycle = (0..config.run.cycles).map(|j| read_selections(dir, r, j)).collect::<Result<Vec<_>, _>>()?;
        selections.push(per_cycle);
    }
    let run = &config.run;
    let outcome = merge(per_repetition(run.workers, &reps, |r| {
        let files = &selections[reps.iter().position(|&x| x == r).expect("listed repetition")];
        let mut learner =
            exp.factory.create(r).map_err(|source| HarnessError::Learner { repetition: r, cycle: 0, source })?;
        let mut labeled = Vec::new();
        let mut records = Vec::with_capacity(files.len());
        for (j, file) in files.iter().enumerate() {
            labeled.extend_from_slice(&file.selected_ids);
            let (f1, faulty) = train_and_score(exp, learner.as_mut(), run, r, j, &labeled, &file.selected_ids)?;
            records.push(CycleRecord {
                strategy: run.strategy,
                pi_u: exp.pool.realized_faulty_fraction(),
                pi_t: exp.test.realized_faulty_fraction(),
                repetition: r,
                cycle: j,
                selected_ids: file.selected_ids.clone(),
                cumulative_labeled: labeled.len(),
                pool_size: exp.pool.len(),
                f1_defect: f1,
                faulty_selected_fraction: faulty,
                wall_time: 0.0,
            });
        }
        Ok(records)
    }));
    let records = outcome.into_result()?;
    let found = metrics_csv_string(&records);
    Ok((compare_csv(&stored, &found), records))
}

/// First differing line of two CSV texts, 1-based.
pub fn compare_csv(stored: &str, found: &str) -> ReplayOutcome {
    let (mut a, mut b) = (stored.lines(), found.lines());
    let mut line = 0;
    loop {
        line += 1;
        match (a.next(), b.next()) {
            (None, None) => break,
            (x, y) if x == y => continue,
            (x, y) => {
                return ReplayOutcome::Mismatch {
                    line,
                    expected: x.unwrap_or("<end of file>").to_string(),
                    found: y.unwrap_or("<end of file>").to_string(),
                }
            }
        }
    }
    if stored != found {
        // Same lines, different line endings or trailing bytes.
        return ReplayOutcome::Mismatch { line, expected: format!("{} bytes", stored.len()), found: format!("{} bytes", found.len()) };
    }
    ReplayOutcome::Consistent { records: parse_metrics_csv(found).map(|r| r.len()).unwrap_or(0) }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_reports_first_divergent_line() {
        let a = "h\n1\n2\n3\n";
        assert!(matches!(compare_csv(a, a), ReplayOutcome::Consistent { .. }));
        match compare_csv(a, "h\n1\n9\n3\n") {
            ReplayOutcome::Mismatch { line, expected, found } => {
                assert_eq!((line, expected.as_str(), found.as_str()), (3, "2", "9"))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(compare_csv(a, "h\n1\n2\n"), ReplayOutcome::Mismatch { line: 4, .. }));
        assert!(matches!(compare_csv(a, "h\n1\n2\n3"), ReplayOutcome::Mismatch { .. }));
    }
}
