//! Mini-batch training with Adam and batched evaluation.
//!
//! All randomness of iteration `i` (batch choice, per-sample downsampling)
//! derives from `(seed, i)` alone, so a trainer restored from its state at
//! iteration `i` continues exactly like an uninterrupted run.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand_distr::{Distribution, Normal};

use crate::data::{DatasetEntry, Sample};
use crate::error::{Error, Result};
use crate::geometry::{downsample, remove_translation, PointCloudSegment};
use crate::model::{stack_segments, Model};
use crate::rng::{derive, rng};
use crate::so3::{AxisAngle, Vec3};
use crate::tensor::{adam_step, AdamState, Tensor};

const BATCH_STREAM: u64 = 1;
const DOWNSAMPLE_STREAM: u64 = 2;
const EVAL_STREAM: u64 = 3;

pub const DEFAULT_BATCH_SIZE: usize = 128;

/// A full segment (camera frame) with its ground-truth pose.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub segment: PointCloudSegment,
    pub rotation: AxisAngle,
    pub translation: Vec3,
}

impl From<Sample> for LabeledSegment {
    fn from(s: Sample) -> Self {
        LabeledSegment { segment: s.segment, rotation: s.rotation.canonicalize(), translation: s.translation }
    }
}

impl From<&DatasetEntry> for LabeledSegment {
    fn from(e: &DatasetEntry) -> Self {
        e.sample.clone().into()
    }
}

/// Network input for one segment: `n` random points with the translation removed.
/// A positive `translation_sigma` perturbs the removed translation with isotropic
/// Gaussian noise, emulating an imperfect external translation estimate.
pub fn prepare_input(
    item: &LabeledSegment,
    n: usize,
    seed: u64,
    translation_sigma: f64,
) -> Result<PointCloudSegment> {
    let seg = downsample(&item.segment, n, seed)?;
    let t = perturbed_translation(item.translation, seed, translation_sigma)?;
    Ok(remove_translation(&seg, t))
}

/// The translation estimate [`prepare_input`] removes for the same `seed` and `sigma`.
pub fn perturbed_translation(t: Vec3, seed: u64, sigma: f64) -> Result<Vec3> {
    if sigma == 0.0 {
        return Ok(t);
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("translation sigma: {e}")))?;
    let mut rng = rng(derive(seed, 0x7472, 0));
    Ok(t.map(|c| c + noise.sample(&mut rng)))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainSettings {
    pub batch_size: usize,
    pub seed: u64,
}

/// Model, optimizer and iteration counter: everything needed to resume.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub settings: TrainSettings,
    pub iteration: u64,
}

impl Trainer {
    pub fn new(model: Model, lr: f64, settings: TrainSettings) -> Result<Self> {
        if settings.batch_size < 2 {
            return Err(Error::BatchTooSmall(settings.batch_size));
        }
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        let adam = AdamState::new(model.parameter_sizes(), lr);
        Ok(Trainer { model, adam, settings, iteration: 0 })
    }

    /// Indices of the training samples used by iteration `it`.
    pub fn batch_indices(&self, it: u64, len: usize) -> Vec<usize> {
        let b = self.settings.batch_size;
        if b >= len {
            return (0..len).collect();
        }
        let mut rng = rng(derive(self.settings.seed, BATCH_STREAM, it));
        index::sample(&mut rng, len, b).into_vec()
    }

    /// Input tensor and targets of iteration `it`.
    pub fn batch(&self, data: &[LabeledSegment], it: u64) -> Result<(Tensor, Vec<AxisAngle>)> {
        let spec = &self.model.spec;
        let ds_seed = derive(self.settings.seed, DOWNSAMPLE_STREAM, it);
        let mut segs = Vec::new();
        let mut targets = Vec::new();
        for i in self.batch_indices(it, data.len()) {
            segs.push(prepare_input(&data[i], spec.num_points, derive(ds_seed, i as u64, 0), 0.0)?);
            targets.push(data[i].rotation);
        }
        Ok((stack_segments(&segs, spec)?, targets))
    }

    /// One optimizer step; returns the batch's mean geodesic loss in radians.
    pub fn step(&mut self, data: &[LabeledSegment]) -> Result<f64> {
        if data.len() < 2 {
            return Err(Error::BatchTooSmall(data.len()));
        }
        let (x, targets) = self.batch(data, self.iteration)?;
        let (loss, grads) = self.model.training_loss(x, &targets)?;
        let grads: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam_step(&mut self.model.parameters_mut(), &grads, &mut self.adam)?;
        self.iteration += 1;
        Ok(loss)
    }
}

/// Seed [`predict_all`] uses to prepare the input of item `index`.
pub fn eval_input_seed(seed: u64, index: usize) -> u64 {
    derive(seed, EVAL_STREAM, index as u64)
}

/// Eval-mode predictions for every item. Inputs are downsampled with seeds
/// derived from `(seed, item index)`; predictions do not depend on `chunk`.
pub fn predict_all(
    model: &Model,
    data: &[LabeledSegment],
    seed: u64,
    translation_sigma: f64,
    chunk: usize,
) -> Result<Vec<AxisAngle>> {
    predict_from(model, data, 0, seed, translation_sigma, chunk)
}

/// [`predict_all`] for a slice that starts at item `first` of the full set, so
/// disjoint slices predicted separately agree with one call over everything.
pub fn predict_from(
    model: &Model,
    data: &[LabeledSegment],
    first: usize,
    seed: u64,
    translation_sigma: f64,
    chunk: usize,
) -> Result<Vec<AxisAngle>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(data.len());
    for (c, items) in data.chunks(chunk).enumerate() {
        let segs = items
            .iter()
            .enumerate()
            .map(|(j, item)| {
                let seed = eval_input_seed(seed, first + c * chunk + j);
                prepare_input(item, model.spec.num_points, seed, translation_sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(model.predict_tensor(stack_segments(&segs, &model.spec)?)?);
    }
    Ok(out)
}
