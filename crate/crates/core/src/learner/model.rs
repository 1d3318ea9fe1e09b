use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatchRecord;
use crate::scalar::Scalar;

use super::features::{extract_features, feature_count, PixelFeatures};
use super::loss::combo_loss_logit_grad;
use super::{LearnerConfig, LearnerError};

#[inline]
pub fn logistic<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Per-pixel defect probabilities, clamped to `[ε, 1 − ε]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T> {
    pub height: usize,
    pub width: usize,
    values: Vec<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Clamps `values` into `[eps, 1 − eps]`.
    pub fn clamped(height: usize, width: usize, values: Vec<T>, eps: T) -> Result<Self, LearnerError> {
        if values.len() != height * width {
            return Err(LearnerError::ShapeMismatch { expected: height * width, found: values.len() });
        }
        let hi = T::one() - eps;
        let values = values.into_iter().map(|v| v.max(eps).min(hi)).collect();
        Ok(Self { height, width, values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Pixels whose probability exceeds one half.
    pub fn threshold(&self) -> Vec<u8> {
        let half = T::lit(0.5);
        self.values.iter().map(|&v| u8::from(v > half)).collect()
    }
}

/// Trained logistic segmenter.
///
/// Weights act on standardised features `(f − shift) / scale`, with the
/// bias stored last. Standardisation statistics come from the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmenter<T> {
    pub weights: Vec<T>,
    pub feature_shift: Vec<T>,
    pub feature_scale: Vec<T>,
    pub image_channels: usize,
    pub config: LearnerConfig,
}

/// Loss trajectory of a training run; `losses[e]` is the mean Combo loss
/// evaluated before update `e`, with one trailing entry for the final weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport<T> {
    pub losses: Vec<T>,
}

impl<T: Scalar> Segmenter<T> {
    /// Zero-weight model with identity standardisation.
    pub fn zeroed(config: LearnerConfig, image_channels: usize) -> Self {
        let f = feature_count(image_channels, &config.scales);
        Self {
            weights: vec![T::zero(); f + 1],
            feature_shift: vec![T::zero(); f],
            feature_scale: vec![T::one(); f],
            image_channels,
            config,
        }
    }

    pub fn feature_count(&self) -> usize {
        self.feature_shift.len()
    }

    pub fn embedding_dim(&self) -> usize {
        2 * self.feature_count()
    }

    fn eps(&self) -> T {
        T::lit(self.config.prob_clamp)
    }

    /// Weights and bias folded onto raw (unstandardised) features.
    fn raw_affine(&self) -> (Vec<T>, T) {
        let f = self.feature_count();
        let mut bias = self.weights[f];
        let w = (0..f)
            .map(|k| {
                let a = self.weights[k] / self.feature_scale[k];
                bias = bias - a * self.feature_shift[k];
                a
            })
            .collect();
        (w, bias)
    }

    fn check_patch(&self, patch: &PatchRecord) -> Result<(), LearnerError> {
        if patch.channels != self.image_channels {
            return Err(LearnerError::ChannelMismatch { expected: self.image_channels, found: patch.channels });
        }
        Ok(())
    }

    pub fn features(&self, patch: &PatchRecord) -> Result<PixelFeatures<T>, LearnerError> {
        self.check_patch(patch)?;
        Ok(extract_features::<T>(patch, &self.config.scales)?.to_pixel_major())
    }

    /// Clamped logistic output for every pixel.
    pub fn predict(&self, patch: &PatchRecord) -> Result<ProbabilityMap<T>, LearnerError> {
        let feats = self.features(patch)?;
        self.predict_features(&feats, patch.height, patch.width)
    }

    pub fn predict_features(&self, feats: &PixelFeatures<T>, height: usize, width: usize) -> Result<ProbabilityMap<T>, LearnerError> {
        if feats.features != self.feature_count() {
            return Err(LearnerError::ShapeMismatch { expected: self.feature_count(), found: feats.features });
        }
        let (w, b) = self.raw_affine();
        let values = (0..feats.pixels).map(|i| logistic(dot(&w, feats.pixel(i)) + b)).collect();
        ProbabilityMap::clamped(height, width, values, self.eps())
    }

    /// Global mean and standard deviation of each standardised feature
    /// channel, concatenated and L2-normalised. A zero vector stays zero.
    pub fn embed(&self, patch: &PatchRecord) -> Result<Vec<T>, LearnerError> {
        let feats = self.features(patch)?;
        Ok(self.embed_features(&feats))
    }

    pub fn embed_features(&self, feats: &PixelFeatures<T>) -> Vec<T> {
        let f = feats.features;
        let n = T::from_count(feats.pixels);
        let mut out = vec![T::zero(); 2 * f];
        for k in 0..f {
            let mean = (0..feats.pixels).map(|i| feats.pixel(i)[k]).sum::<T>() / n;
            let var = (0..feats.pixels)
                .map(|i| {
                    let d = feats.pixel(i)[k] - mean;
                    d * d
                })
                .sum::<T>()
                / n;
            out[k] = (mean - self.feature_shift[k]) / self.feature_scale[k];
            out[f + k] = var.sqrt() / self.feature_scale[k];
        }
        let norm = out.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            for v in &mut out {
                *v = *v / norm;
            }
        }
        out
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Trains from scratch on decoded patches.
pub fn train<T: Scalar>(labeled: &[PatchRecord], config: &LearnerConfig) -> Result<Segmenter<T>, LearnerError> {
    config.validate()?;
    let first = labeled.first().ok_or(LearnerError::EmptyTrainingSet)?;
    let probe = Segmenter::<T>::zeroed(config.clone(), first.channels);
    let feats = labeled.par_iter().map(|p| probe.features(p)).collect::<Result<Vec<_>, _>>()?;
    let samples: Vec<(&PixelFeatures<T>, &[u8])> = feats.iter().zip(labeled).map(|(f, p)| (f, p.mask.as_slice())).collect();
    Ok(train_on_features(&samples, first.channels, config)?.0)
}

/// Full-batch gradient descent on the mean per-patch Combo loss, starting
/// from zero weights. Per-patch gradients are reduced in input order so the
/// result does not depend on thread scheduling.
pub fn train_on_features<T: Scalar>(
    samples: &[(&PixelFeatures<T>, &[u8])],
    image_channels: usize,
    config: &LearnerConfig,
) -> Result<(Segmenter<T>, TrainingReport<T>), LearnerError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(LearnerError::EmptyTrainingSet);
    }
    let mut model = Segmenter::<T>::zeroed(config.clone(), image_channels);
    let f = model.feature_count();
    for (feats, mask) in samples {
        if feats.features != f {
            return Err(LearnerError::ShapeMismatch { expected: f, found: feats.features });
        }
        if mask.len() != feats.pixels {
            return Err(LearnerError::ShapeMismatch { expected: feats.pixels, found: mask.len() });
        }
    }
    standardise(&mut model, samples);

    let lr = T::lit(config.learning_rate);
    let smoothing = T::lit(config.smoothing);
    let eps = model.eps();
    let count = T::from_count(samples.len());
    let mut losses = Vec::with_capacity(config.epochs + 1);

    for epoch in 0..=config.epochs {
        let (w, b) = model.raw_affine();
        let per_patch = samples
            .par_iter()
            .map(|(feats, mask)| {
                let hi = T::one() - eps;
                let p: Vec<T> = (0..feats.pixels)
                    .map(|i| logistic(dot(&w, feats.pixel(i)) + b).max(eps).min(hi))
                    .collect();
                let (loss, g) = combo_loss_logit_grad(&p, mask, smoothing)?;
                let mut raw = vec![T::zero(); f + 1];
                for (i, &gi) in g.iter().enumerate() {
                    for (acc, &x) in raw[..f].iter_mut().zip(feats.pixel(i)) {
                        *acc = *acc + gi * x;
                    }
                    raw[f] = raw[f] + gi;
                }
                Ok((loss, raw))
            })
            .collect::<Result<Vec<_>, LearnerError>>()?;

        let mut loss = T::zero();
        let mut raw = vec![T::zero(); f + 1];
        for (l, g) in per_patch {
            loss = loss + l;
            for (a, v) in raw.iter_mut().zip(g) {
                *a = *a + v;
            }
        }
        let loss = loss / count;
        if !loss.is_finite() {
            return Err(LearnerError::NonFinite { epoch, learning_rate: config.learning_rate });
        }
        losses.push(loss);
        if epoch == config.epochs {
            break;
        }
        let bias_grad = raw[f] / count;
        for k in 0..f {
            // Chain rule from raw-feature sums to standardised weights.
            let gk = (raw[k] / count - model.feature_shift[k] * bias_grad) / model.feature_scale[k];
            model.weights[k] = model.weights[k] - lr * gk;
        }
        model.weights[f] = model.weights[f] - lr * bias_grad;
        if model.weights.iter().any(|w| !w.is_finite()) {
            return Err(LearnerError::NonFinite { epoch, learning_rate: config.learning_rate });
        }
    }
    Ok((model, TrainingReport { losses }))
}

/// Per-feature mean and standard deviation over all training pixels.
fn standardise<T: Scalar>(model: &mut Segmenter<T>, samples: &[(&PixelFeatures<T>, &[u8])]) {
    let f = model.feature_count();
    let total = T::from_count(samples.iter().map(|(x, _)| x.pixels).sum());
    let mut mean = vec![T::zero(); f];
    for (feats, _) in samples {
        for i in 0..feats.pixels {
            for (m, &x) in mean.iter_mut().zip(feats.pixel(i)) {
                *m = *m + x;
            }
        }
    }
    for m in &mut mean {
        *m = *m / total;
    }
    let mut var = vec![T::zero(); f];
    for (feats, _) in samples {
        for i in 0..feats.pixels {
            for ((v, &x), &m) in var.iter_mut().zip(feats.pixel(i)).zip(&mean) {
                *v = *v + (x - m) * (x - m);
            }
        }
    }
    let tiny = T::lit(1e-12);
    model.feature_scale = var
        .into_iter()
        .map(|v| {
            let sd = (v / total).sqrt();
            if sd > tiny {
                sd
            } else {
                T::one()
            }
        })
        .collect();
    model.feature_shift = mean;
}
