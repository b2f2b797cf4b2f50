//! Metrics: geodesic angle error, ADD, occlusion factor, occlusion-binned error
//! statistics and accuracy-versus-threshold curves.
//!
//! Everything is in radians and meters; degrees appear only where reports are
//! written.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::data::ObjectModel;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::so3::{self, AxisAngle, RotationMatrix, Vec3};

/// Occlusion factors below this are "low", everything else "moderate".
pub const LOW_OCCLUSION_LIMIT: f64 = 0.2;
/// z-value of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;
pub const CI_METHOD: &str = "normal approximation: 1.96 * sample std / sqrt(n)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum OcclusionBin {
    Low,
    Moderate,
}

impl OcclusionBin {
    pub const ALL: [OcclusionBin; 2] = [OcclusionBin::Low, OcclusionBin::Moderate];

    pub fn of(occlusion: f64) -> Self {
        if occlusion < LOW_OCCLUSION_LIMIT {
            OcclusionBin::Low
        } else {
            OcclusionBin::Moderate
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            OcclusionBin::Low => "low",
            OcclusionBin::Moderate => "moderate",
        }
    }
}

/// Geodesic angle between predicted and true rotation, radians in [0, π].
pub fn angle_error(r_hat: AxisAngle, r: AxisAngle) -> f64 {
    so3::geodesic_loss(r_hat, r)
}

/// Average distance between model points under the true and the estimated pose.
pub fn add_metric(
    model: &ObjectModel,
    r: &RotationMatrix,
    t: Vec3,
    r_hat: &RotationMatrix,
    t_hat: Vec3,
) -> Result<f64> {
    if model.points.is_empty() {
        return Err(Error::Empty("object model"));
    }
    let mut sum = 0.0;
    for &x in &model.points {
        let a = so3::add(r.apply(x), t);
        let b = so3::add(r_hat.apply(x), t_hat);
        sum += so3::norm(so3::sub(a, b));
    }
    Ok(sum / model.points.len() as f64)
}

/// A pose is correct when its ADD is strictly below the threshold.
pub fn add_correct(add: f64, threshold: f64) -> bool {
    add < threshold
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionFactor {
    pub value: f64,
    /// Set when the visible count exceeded the projected count and the value was clamped to 0.
    pub clamped: bool,
}

/// `O = 1 − λ/μ` from visible mask pixels λ and projected model pixels μ.
/// Evaluated as `(μ − λ)/μ` so that exact fractions such as 0.2 round to the literal.
pub fn occlusion_factor(visible: usize, projected: usize) -> Result<OcclusionFactor> {
    if projected == 0 {
        return Err(Error::ZeroProjection);
    }
    if visible > projected {
        return Ok(OcclusionFactor { value: 0.0, clamped: true });
    }
    Ok(OcclusionFactor { value: (projected - visible) as f64 / projected as f64, clamped: false })
}

/// Number of distinct in-image pixels hit by the model points under pose `(r, t)`.
/// Each point lands on the pixel whose center is nearest.
pub fn project_model_pixels(
    model: &ObjectModel,
    r: &RotationMatrix,
    t: Vec3,
    intr: &CameraIntrinsics,
) -> Result<usize> {
    let mut hit = BTreeSet::new();
    for &x in &model.points {
        let p = so3::add(r.apply(x), t);
        if !(p[2] > 0.0) {
            return Err(Error::BehindCamera(p[2]));
        }
        let (u, v) = intr.project(p);
        let (u, v) = (u.round(), v.round());
        if u >= 0.0 && v >= 0.0 && u < intr.width as f64 && v < intr.height as f64 {
            hit.insert((v as usize, u as usize));
        }
    }
    Ok(hit.len())
}

/// One evaluated frame.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalRecord {
    pub frame_id: String,
    pub angle_error: f64,
    pub add: Option<f64>,
    pub occlusion_factor: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub occlusion_clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BinSummary {
    pub bin: OcclusionBin,
    pub count: usize,
    pub mean_error: Option<f64>,
    /// Half-width of the 95% interval of the mean; absent below two records.
    pub ci95: Option<f64>,
}

/// Mean and 95% half-width of `values`.
pub fn mean_ci95(values: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (None, None);
    }
    // shifted by the first value so identical inputs give their value and zero spread exactly
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    if n < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some(Z95 * var.sqrt() / (n as f64).sqrt()))
}

/// Low and moderate bins, in that order.
pub fn bin_by_occlusion(records: &[EvalRecord]) -> Vec<BinSummary> {
    OcclusionBin::ALL
        .iter()
        .map(|&bin| {
            let errors: Vec<f64> = records
                .iter()
                .filter(|r| OcclusionBin::of(r.occlusion_factor) == bin)
                .map(|r| r.angle_error)
                .collect();
            let (mean_error, ci95) = mean_ci95(&errors);
            BinSummary { bin, count: errors.len(), mean_error, ci95 }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CurvePoint {
    pub threshold: f64,
    pub fraction: f64,
}

/// Fraction of records whose angle error is strictly below each threshold.
pub fn accuracy_curve(records: &[EvalRecord], thresholds: &[f64]) -> Result<Vec<CurvePoint>> {
    if records.is_empty() {
        return Err(Error::Empty("records"));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::InvalidArgument("thresholds must be sorted ascending".into()));
    }
    let mut errors: Vec<f64> = records.iter().map(|r| r.angle_error).collect();
    errors.sort_by(f64::total_cmp);
    let n = errors.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let below = errors.partition_point(|&e| e < threshold);
            CurvePoint { threshold, fraction: below as f64 / n }
        })
        .collect())
}

/// Thresholds 1°, 2°, …, 180° in radians.
pub fn default_thresholds() -> Vec<f64> {
    (1..=180).map(|d| (d as f64).to_radians()).collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub accuracy_curve: Vec<CurvePoint>,
    pub bins: Vec<BinSummary>,
    pub add_threshold: Option<f64>,
    /// Fraction of records with ADD strictly below `add_threshold`.
    pub add_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn build(records: Vec<EvalRecord>, thresholds: &[f64], add_threshold: Option<f64>) -> Result<Self> {
        let accuracy_curve = accuracy_curve(&records, thresholds)?;
        let bins = bin_by_occlusion(&records);
        let add_accuracy = add_threshold.and_then(|tau| {
            let adds: Vec<f64> = records.iter().filter_map(|r| r.add).collect();
            (!adds.is_empty())
                .then(|| adds.iter().filter(|&&a| add_correct(a, tau)).count() as f64 / adds.len() as f64)
        });
        Ok(EvalReport { records, accuracy_curve, bins, add_threshold, add_accuracy })
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.angle_error).collect()
    }

    pub fn mean_error(&self) -> Option<f64> {
        mean_ci95(&self.errors()).0
    }

    pub fn median_error(&self) -> Option<f64> {
        median(&self.errors())
    }

    /// Fraction of records with angle error strictly above `angle`.
    pub fn fraction_above(&self, angle: f64) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.angle_error > angle).count() as f64 / self.records.len() as f64
    }
}
