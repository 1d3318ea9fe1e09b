//! Pool-based active learning for binary defect segmentation, simulated at
//! desk scale with controlled class imbalance and label shift.
//!
//! The numeric core (features, loss, learner, acquisition, summaries) is
//! generic over [`Scalar`]; the aliases below fix the precision used by the
//! harness and the command-line tool.

pub mod acquisition;
pub mod data;
pub mod harness;
pub mod learner;
pub mod metrics;
pub mod report;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use acquisition::{SelectionResult, Strategy};
pub use data::{DatasetManifest, PatchId, PatchRecord};
pub use harness::{ALRunConfig, CycleRecord};
pub use learner::LearnerConfig;
pub use scalar::Scalar;

/// Exact proportions (faulty fractions, uniqueness scores).
pub type Fraction = num_rational::Ratio<u64>;

pub type Segmenter64 = learner::Segmenter<f64>;
pub type Segmenter32 = learner::Segmenter<f32>;
pub type ProbabilityMap64 = learner::ProbabilityMap<f64>;
pub type ProbabilityMap32 = learner::ProbabilityMap<f32>;
pub type ScoreVector64 = acquisition::ScoreVector<f64>;
pub type Summary64 = metrics::Summary<f64>;
