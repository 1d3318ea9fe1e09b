//! Acquisition strategies: uniform random, mean pixel entropy, and
//! k-center greedy core-set selection.
//!
//! Every strategy breaks ties in favour of the lowest id.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PatchId;
use crate::learner::ProbabilityMap;
use crate::scalar::Scalar;
use crate::seed::rng_from;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("budget {budget} exceeds {candidates} candidates")]
    BudgetExceeded { budget: usize, candidates: usize },
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate candidate id {0}")]
    DuplicateId(PatchId),
    #[error("non-finite score for id {0}")]
    NonFinite(PatchId),
    #[error("unknown strategy {0:?} (expected random, entropy or coreset)")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Random,
    Entropy,
    Coreset,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Random, Strategy::Entropy, Strategy::Coreset];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::Coreset => "coreset",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = SelectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Strategy::Random),
            "entropy" => Ok(Strategy::Entropy),
            "coreset" => Ok(Strategy::Coreset),
            other => Err(SelectionError::UnknownStrategy(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_ids: Vec<PatchId>,
    pub strategy: Strategy,
}

/// Per-candidate acquisition scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector<T> {
    pairs: Vec<(PatchId, T)>,
}

impl<T: Scalar> ScoreVector<T> {
    pub fn new(pairs: Vec<(PatchId, T)>) -> Result<Self, SelectionError> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for &(id, s) in &pairs {
            if !seen.insert(id) {
                return Err(SelectionError::DuplicateId(id));
            }
            if !s.is_finite() {
                return Err(SelectionError::NonFinite(id));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(PatchId, T)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_budget(budget: usize, candidates: usize) -> Result<(), SelectionError> {
    if budget > candidates {
        Err(SelectionError::BudgetExceeded { budget, candidates })
    } else {
        Ok(())
    }
}

/// Uniform sample of `budget` ids without replacement.
pub fn select_random(candidates: &[PatchId], budget: usize, seed: u64) -> Result<SelectionResult, SelectionError> {
    check_budget(budget, candidates.len())?;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(SelectionError::DuplicateId(w[0]));
    }
    let mut rng = rng_from(seed);
    let chosen_ids = sample(&mut rng, sorted.len(), budget).into_iter().map(|i| sorted[i]).collect();
    Ok(SelectionResult { chosen_ids, strategy: Strategy::Random })
}

/// Pixel-averaged binary Shannon entropy in nats.
pub fn mean_entropy<T: Scalar>(p: &ProbabilityMap<T>) -> T {
    mean_entropy_values(p.values())
}

pub fn mean_entropy_values<T: Scalar>(p: &[T]) -> T {
    let sum: T = p
        .iter()
        .map(|&v| {
            let c = T::one() - v;
            v * v.ln() + c * c.ln()
        })
        .sum();
    -sum / T::from_count(p.len())
}

/// The `budget` highest-scoring ids, highest first.
pub fn select_entropy<T: Scalar>(scores: &ScoreVector<T>, budget: usize) -> Result<SelectionResult, SelectionError> {
    check_budget(budget, scores.len())?;
    let mut ranked = scores.pairs.clone();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    Ok(SelectionResult { chosen_ids: ranked.into_iter().take(budget).map(|(id, _)| id).collect(), strategy: Strategy::Entropy })
}

pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// k-center greedy selection.
///
/// Centers start as the labeled embeddings. Each step picks the unchosen
/// candidate farthest from its nearest center, then lowers every other
/// candidate's nearest-center distance against the new center. With no
/// labeled embeddings all distances start infinite, so the lowest id is
/// picked first. Cost is `O((L + B) · C · d)`.
pub fn select_coreset<T: Scalar>(
    labeled: &[Vec<T>],
    candidates: &[(PatchId, Vec<T>)],
    budget: usize,
) -> Result<SelectionResult, SelectionError> {
    check_budget(budget, candidates.len())?;
    let dim = candidates.first().map(|c| c.1.len()).or_else(|| labeled.first().map(Vec::len)).unwrap_or(0);
    for v in labeled.iter().chain(candidates.iter().map(|c| &c.1)) {
        if v.len() != dim {
            return Err(SelectionError::DimensionMismatch { expected: dim, found: v.len() });
        }
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| candidates[i].0);
    if let Some(w) = order.windows(2).find(|w| candidates[w[0]].0 == candidates[w[1]].0) {
        return Err(SelectionError::DuplicateId(candidates[w[0]].0));
    }
    let points: Vec<&[T]> = order.iter().map(|&i| candidates[i].1.as_slice()).collect();

    let mut nearest: Vec<T> = points
        .iter()
        .map(|p| labeled.iter().map(|c| euclidean(p, c)).fold(T::infinity(), T::min))
        .collect();
    let mut taken = vec![false; points.len()];
    let mut chosen_ids = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut best: Option<usize> = None;
        for (i, &d) in nearest.iter().enumerate() {
            if taken[i] {
                continue;
            }
            // Strict comparison keeps the lowest id on ties (points are id-sorted).
            if best.is_none_or(|b| d > nearest[b]) {
                best = Some(i);
            }
        }
        let pick = best.expect("budget checked against candidate count");
        taken[pick] = true;
        chosen_ids.push(candidates[order[pick]].0);
        let center = points[pick];
        for (i, p) in points.iter().enumerate() {
            if !taken[i] {
                let d = euclidean(p, center);
                if d < nearest[i] {
                    nearest[i] = d;
                }
            }
        }
    }
    Ok(SelectionResult { chosen_ids, strategy: Strategy::Coreset })
}
