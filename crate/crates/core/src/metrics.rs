//! Evaluation criteria: pixel-level F1 of the defect class, the fraction of
//! faulty images among selections, the cross-repetition uniqueness score,
//! and mean / interquartile summaries.

use std::collections::{BTreeMap, HashSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetManifest, PatchId};
use crate::learner::ProbabilityMap;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: prediction has {pred} pixels, truth has {truth}")]
    ShapeMismatch { pred: usize, truth: usize },
    #[error("empty selection")]
    EmptySelection,
    #[error("unknown id {0}")]
    UnknownId(PatchId),
    #[error("unequal selection sizes: expected {expected}, found {found}")]
    UnequalSetSizes { expected: usize, found: usize },
    #[error("selection contains id {0} more than once")]
    RepeatedId(PatchId),
    #[error("uniqueness needs at least two repetitions with nonempty selections")]
    TooFewSelections,
    #[error("empty group")]
    EmptyGroup,
}

/// Pixel confusion counts for the defect class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &[u8], truth: &[u8]) -> Result<Self, MetricsError> {
        if pred.len() != truth.len() {
            return Err(MetricsError::ShapeMismatch { pred: pred.len(), truth: truth.len() });
        }
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`, or 0 when the denominator vanishes.
    pub fn f1(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Micro-aggregated F1 over a whole test set of thresholded masks.
pub fn f1_defect<P: AsRef<[u8]>, Q: AsRef<[u8]>>(predictions: &[P], truths: &[Q]) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::ShapeMismatch { pred: predictions.len(), truth: truths.len() });
    }
    let counts = predictions
        .iter()
        .zip(truths)
        .map(|(p, t)| ConfusionCounts::from_masks(p.as_ref(), t.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(counts.into_iter().sum::<ConfusionCounts>().f1())
}

/// Confusion counts of a probability map thresholded at one half.
pub fn confusion_from_probabilities<T: Scalar>(p: &ProbabilityMap<T>, truth: &[u8]) -> Result<ConfusionCounts, MetricsError> {
    ConfusionCounts::from_masks(&p.threshold(), truth)
}

/// Exact fraction of `selected` ids flagged faulty in `manifest`.
pub fn faulty_selected_fraction(selected: &[PatchId], manifest: &DatasetManifest) -> Result<Ratio<u64>, MetricsError> {
    if selected.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let mut faulty = 0u64;
    for &id in selected {
        let e = manifest.get(id).ok_or(MetricsError::UnknownId(id))?;
        faulty += u64::from(e.faulty);
    }
    Ok(Ratio::new(faulty, selected.len() as u64))
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UniquenessRecord {
    pub cycle: usize,
    /// `(|∪ S_r| − b) / (b (R − 1))`, exact.
    pub us: Ratio<u64>,
    pub b: usize,
    pub repetitions: usize,
}

impl UniquenessRecord {
    pub fn us_f64(&self) -> f64 {
        ratio_to_f64(self.us)
    }
}

/// Uniqueness of the cycle-`cycle` selections across repetitions: 0 when
/// every repetition chose the same set, 1 when all sets are disjoint.
pub fn uniqueness_score<S: AsRef<[PatchId]>>(cycle: usize, selections: &[S]) -> Result<UniquenessRecord, MetricsError> {
    let r = selections.len();
    let b = selections.first().map(|s| s.as_ref().len()).unwrap_or(0);
    if r < 2 || b == 0 {
        return Err(MetricsError::TooFewSelections);
    }
    let mut union = HashSet::new();
    for s in selections {
        let s = s.as_ref();
        if s.len() != b {
            return Err(MetricsError::UnequalSetSizes { expected: b, found: s.len() });
        }
        let mut own = HashSet::with_capacity(b);
        for &id in s {
            if !own.insert(id) {
                return Err(MetricsError::RepeatedId(id));
            }
            union.insert(id);
        }
    }
    let us = Ratio::new((union.len() - b) as u64, (b * (r - 1)) as u64);
    Ok(UniquenessRecord { cycle, us, b, repetitions: r })
}

/// Mean, median and quartiles of one group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary<T> {
    pub count: usize,
    pub mean: T,
    pub q1: T,
    pub median: T,
    pub q3: T,
}

/// Quantile of sorted data by linear interpolation between order
/// statistics at position `q (n − 1)`.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], q: f64) -> T {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::lit(pos - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Summary statistics; values are sorted first so the result does not
/// depend on input order.
pub fn summarize<T: Scalar>(values: &[T]) -> Result<Summary<T>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyGroup);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let mean = sorted.iter().copied().sum::<T>() / T::from_count(sorted.len());
    Ok(Summary {
        count: sorted.len(),
        mean,
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    })
}

/// Groups `(key, value)` pairs and summarises each group.
pub fn aggregate<K: Ord, T: Scalar>(items: impl IntoIterator<Item = (K, T)>) -> Result<BTreeMap<K, Summary<T>>, MetricsError> {
    let mut groups: BTreeMap<K, Vec<T>> = BTreeMap::new();
    for (k, v) in items {
        groups.entry(k).or_default().push(v);
    }
    groups.into_iter().map(|(k, v)| Ok((k, summarize(&v)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ManifestEntry, Role};
    use proptest::prelude::*;
    use std::path::PathBuf;

    #[test]
    fn f1_cases() {
        assert_eq!(f1_defect(&[vec![1, 0, 1]], &[vec![1, 0, 1]]).unwrap(), 1.0);
        assert_eq!(f1_defect(&[vec![0, 0, 0], vec![0, 0]], &[vec![1, 0, 0], vec![0, 1]]).unwrap(), 0.0);
        let c = ConfusionCounts { tp: 8, fp: 2, fn_: 2, tn: 0 };
        assert_eq!(c.f1(), 0.8);
        assert_eq!(ConfusionCounts::default().f1(), 0.0);
        assert!(matches!(f1_defect(&[vec![1]], &[vec![1, 0]]), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn probability_threshold_is_strict() {
        let p = ProbabilityMap::clamped(1, 3, vec![0.5f64, 0.51, 0.2], 1e-7).unwrap();
        let c = confusion_from_probabilities(&p, &[1, 1, 0]).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 0, fn_: 1, tn: 1 });
    }

    fn manifest(faulty: &[bool]) -> DatasetManifest {
        let entries = faulty
            .iter()
            .enumerate()
            .map(|(i, &f)| ManifestEntry { id: i as u64, image: PathBuf::from("i"), mask: PathBuf::from("m"), faulty: f })
            .collect();
        DatasetManifest::new(Role::Pool, entries).unwrap()
    }

    #[test]
    fn faulty_fraction_cases() {
        let flags: Vec<bool> = (0..86).map(|i| i < 34).collect();
        let m = manifest(&flags);
        let ids: Vec<u64> = (0..86).collect();
        let r = faulty_selected_fraction(&ids, &m).unwrap();
        assert_eq!(r, Ratio::new(34, 86));
        assert!((ratio_to_f64(r) - 0.3953).abs() < 1e-4);
        assert_eq!(faulty_selected_fraction(&[0, 1], &m).unwrap(), Ratio::from_integer(1));
        assert_eq!(faulty_selected_fraction(&[], &m).unwrap_err(), MetricsError::EmptySelection);
        assert_eq!(faulty_selected_fraction(&[500], &m).unwrap_err(), MetricsError::UnknownId(500));
    }

    #[test]
    fn uniqueness_constructed_cases() {
        let same = uniqueness_score(0, &[vec![1, 2], vec![1, 2], vec![1, 2]]).unwrap();
        assert_eq!(same.us_f64(), 0.0);
        let disjoint = uniqueness_score(0, &[vec![1, 2], vec![3, 4], vec![5, 6]]).unwrap();
        assert_eq!(disjoint.us_f64(), 1.0);
        let half = uniqueness_score(3, &[vec![1, 2], vec![1, 3], vec![1, 4]]).unwrap();
        assert_eq!(half.us, Ratio::new(1, 2));
        assert_eq!((half.cycle, half.b, half.repetitions), (3, 2, 3));
        assert!(matches!(uniqueness_score(0, &[vec![1, 2], vec![3]]), Err(MetricsError::UnequalSetSizes { .. })));
        assert!(matches!(uniqueness_score(0, &[vec![1, 2]]), Err(MetricsError::TooFewSelections)));
    }

    #[test]
    fn quartiles_linear_interpolation() {
        let s = summarize(&[0.8f64, 0.2, 0.6, 0.4]).unwrap();
        assert!((s.q1 - 0.35).abs() < 1e-15);
        assert!((s.q3 - 0.65).abs() < 1e-15);
        assert!((s.median - 0.5).abs() < 1e-15);
        let one = summarize(&[0.42]).unwrap();
        assert_eq!((one.mean, one.q1, one.q3), (0.42, 0.42, 0.42));
        let same = summarize(&[0.1f64; 15]).unwrap();
        assert!((same.mean - 0.1).abs() < 1e-15);
        assert_eq!(summarize::<f64>(&[]).unwrap_err(), MetricsError::EmptyGroup);
    }

    #[test]
    fn aggregate_groups_by_key() {
        let g = aggregate(vec![("a", 1.0), ("b", 2.0), ("a", 3.0)]).unwrap();
        assert_eq!(g["a"].mean, 2.0);
        assert_eq!(g["b"].count, 1);
    }

    proptest! {
        #[test]
        fn f1_in_unit_interval_and_additive(
            masks in proptest::collection::vec((proptest::collection::vec(0u8..2, 16), proptest::collection::vec(0u8..2, 16)), 1..8)
        ) {
            let preds: Vec<_> = masks.iter().map(|m| m.0.clone()).collect();
            let truths: Vec<_> = masks.iter().map(|m| m.1.clone()).collect();
            let f1 = f1_defect(&preds, &truths).unwrap();
            prop_assert!((0.0..=1.0).contains(&f1));
            let summed: ConfusionCounts = preds.iter().zip(&truths).map(|(p, t)| ConfusionCounts::from_masks(p, t).unwrap()).sum();
            prop_assert_eq!(summed.f1(), f1);
            prop_assert_eq!(summed.total(), 16 * masks.len() as u64);
            prop_assert_eq!(f1 == 1.0, summed.fp == 0 && summed.fn_ == 0 && summed.tp > 0);
        }

        #[test]
        fn uniqueness_in_range_and_relabel_invariant(
            family in proptest::collection::vec(proptest::collection::btree_set(0u64..30, 4), 2..6),
            shift in 1u64..1000,
        ) {
            let sets: Vec<Vec<u64>> = family.iter().map(|s| s.iter().copied().collect()).collect();
            let u = uniqueness_score(0, &sets).unwrap();
            prop_assert!((0.0..=1.0).contains(&u.us_f64()));
            let relabeled: Vec<Vec<u64>> = sets.iter().map(|s| s.iter().map(|x| x * 3 + shift).collect()).collect();
            prop_assert_eq!(uniqueness_score(0, &relabeled).unwrap().us, u.us);
        }

        #[test]
        fn summary_permutation_invariant(mut v in proptest::collection::vec(0.0f64..1.0, 1..20), seed in any::<u64>()) {
            let a = summarize(&v).unwrap();
            let n = v.len();
            v.rotate_left((seed as usize) % n);
            v.reverse();
            prop_assert_eq!(summarize(&v).unwrap(), a);
            prop_assert!(a.q1 <= a.median && a.median <= a.q3);
        }
    }
}
