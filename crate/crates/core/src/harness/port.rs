//! The learner contract consumed by the harness, and its in-process
//! implementation backed by the built-in logistic segmenter.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, PatchId, PatchRecord};
use crate::learner::{train_on_features, LearnerConfig, LearnerError, PixelFeatures, ProbabilityMap, Segmenter};
use crate::scalar::Scalar;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum PortError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown patch id {0}")]
    UnknownId(PatchId),
    #[error("model not trained")]
    NotTrained,
    #[error("adapter: {0}")]
    Adapter(String),
}

/// Train / predict / embed over patch ids.
pub trait LearnerPort<T: Scalar>: Send {
    /// Fits from scratch on `labeled`.
    fn train(&mut self, labeled: &[PatchId], seed: u64) -> Result<(), PortError>;
    /// Probability maps in request order.
    fn predict(&mut self, ids: &[PatchId]) -> Result<Vec<ProbabilityMap<T>>, PortError>;
    /// Embeddings in request order.
    fn embed(&mut self, ids: &[PatchId]) -> Result<Vec<Vec<T>>, PortError>;
}

/// Creates one independent learner per repetition.
pub trait LearnerFactory<T: Scalar>: Sync {
    fn create(&self, repetition: usize) -> Result<Box<dyn LearnerPort<T>>, PortError>;
}

/// Decoded patches of the pool and test manifests, keyed by id.
#[derive(Debug, Default)]
pub struct PatchStore {
    patches: HashMap<PatchId, PatchRecord>,
}

impl PatchStore {
    pub fn load(manifests: &[&DatasetManifest]) -> Result<Self, DataError> {
        let mut patches = HashMap::new();
        for m in manifests {
            for p in m.read_all()? {
                patches.insert(p.id, p);
            }
        }
        Ok(Self { patches })
    }

    pub fn from_records(records: impl IntoIterator<Item = PatchRecord>) -> Self {
        Self { patches: records.into_iter().map(|p| (p.id, p)).collect() }
    }

    pub fn get(&self, id: PatchId) -> Option<&PatchRecord> {
        self.patches.get(&id)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    fn channels(&self) -> usize {
        self.patches.values().map(|p| p.channels).min().unwrap_or(1)
    }
}

/// Precomputed pixel features for every stored patch.
pub struct FeatureBank<T> {
    features: HashMap<PatchId, PixelFeatures<T>>,
    store: Arc<PatchStore>,
    channels: usize,
}

impl<T: Scalar> FeatureBank<T> {
    pub fn build(store: Arc<PatchStore>, config: &LearnerConfig) -> Result<Self, LearnerError> {
        config.validate()?;
        let channels = store.channels();
        let probe = Segmenter::<T>::zeroed(config.clone(), channels);
        let mut ids: Vec<PatchId> = store.patches.keys().copied().collect();
        ids.sort_unstable();
        let features = ids
            .par_iter()
            .map(|&id| Ok((id, probe.features(&store.patches[&id])?)))
            .collect::<Result<HashMap<_, _>, LearnerError>>()?;
        Ok(Self { features, store, channels })
    }

    fn get(&self, id: PatchId) -> Result<(&PixelFeatures<T>, &PatchRecord), PortError> {
        match (self.features.get(&id), self.store.get(id)) {
            (Some(f), Some(p)) => Ok((f, p)),
            _ => Err(PortError::UnknownId(id)),
        }
    }
}

/// In-process learner over a shared feature bank.
pub struct BuiltinLearner<T> {
    config: LearnerConfig,
    bank: Arc<FeatureBank<T>>,
    model: Option<Segmenter<T>>,
}

impl<T: Scalar> BuiltinLearner<T> {
    pub fn new(config: LearnerConfig, bank: Arc<FeatureBank<T>>) -> Self {
        Self { config, bank, model: None }
    }

    pub fn model(&self) -> Option<&Segmenter<T>> {
        self.model.as_ref()
    }

    fn trained(&self) -> Result<&Segmenter<T>, PortError> {
        self.model.as_ref().ok_or(PortError::NotTrained)
    }
}

impl<T: Scalar> LearnerPort<T> for BuiltinLearner<T> {
    fn train(&mut self, labeled: &[PatchId], _seed: u64) -> Result<(), PortError> {
        let samples = labeled
            .iter()
            .map(|&id| self.bank.get(id).map(|(f, p)| (f, p.mask.as_slice())))
            .collect::<Result<Vec<_>, _>>()?;
        let (model, _) = train_on_features(&samples, self.bank.channels, &self.config)?;
        self.model = Some(model);
        Ok(())
    }

    fn predict(&mut self, ids: &[PatchId]) -> Result<Vec<ProbabilityMap<T>>, PortError> {
        let model = self.trained()?;
        ids.par_iter()
            .map(|&id| {
                let (f, p) = self.bank.get(id)?;
                Ok(model.predict_features(f, p.height, p.width)?)
            })
            .collect()
    }

    fn embed(&mut self, ids: &[PatchId]) -> Result<Vec<Vec<T>>, PortError> {
        let model = self.trained()?;
        ids.par_iter().map(|&id| Ok(model.embed_features(self.bank.get(id)?.0))).collect()
    }
}

/// Factory sharing one feature bank between all repetitions.
pub struct BuiltinFactory<T> {
    config: LearnerConfig,
    bank: Arc<FeatureBank<T>>,
}

impl<T: Scalar> BuiltinFactory<T> {
    pub fn new(config: LearnerConfig, store: Arc<PatchStore>) -> Result<Self, LearnerError> {
        let bank = Arc::new(FeatureBank::build(store, &config)?);
        Ok(Self { config, bank })
    }
}

impl<T: Scalar> LearnerFactory<T> for BuiltinFactory<T> {
    fn create(&self, _repetition: usize) -> Result<Box<dyn LearnerPort<T>>, PortError> {
        Ok(Box::new(BuiltinLearner::new(self.config.clone(), Arc::clone(&self.bank))))
    }
}
