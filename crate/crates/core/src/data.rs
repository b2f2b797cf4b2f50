//! Synthetic training and test data: canonical object shapes under uniformly
//! random rotations, with half-space occlusion and Gaussian sensor noise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::eval::OcclusionBin;
use crate::geometry::{CameraIntrinsics, DepthImage, Mask, PointCloudSegment};
use crate::rng::{derive, rng};
use crate::so3::{self, AxisAngle, Vec3};

/// Fewest points a generated segment may keep.
pub const MIN_VISIBLE: usize = 32;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.003;
/// Upper end of the moderate occlusion range generated by [`make_dataset`].
pub const MODERATE_OCCLUSION_MAX: f64 = 0.4;
/// Points in each built-in shape.
pub const BUILTIN_POINTS: usize = 1024;

/// Rigid object as a point set in its own frame, meters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ObjectModel {
    pub name: String,
    pub points: Vec<Vec3>,
}

impl ObjectModel {
    pub fn new(name: impl Into<String>, points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("object model"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("object model has non-finite coordinates".into()));
        }
        Ok(ObjectModel { name: name.into(), points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = so3::add(c, *p);
        }
        so3::scale(c, 1.0 / self.points.len() as f64)
    }

    /// Largest distance between two model points.
    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                d = d.max(so3::norm(so3::sub(*a, *b)));
            }
        }
        d
    }

    /// Built-in shape by name: `l-shape` or `bar`.
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "l-shape" => Ok(Self::l_shape()),
            "bar" => Ok(Self::symmetric_bar()),
            _ => Err(Error::InvalidArgument(format!("unknown built-in shape {name:?} (expected l-shape or bar)"))),
        }
    }

    /// Two boxes joined at a right angle with arms of unequal length. No proper
    /// rotation other than the identity maps it onto itself.
    pub fn l_shape() -> Self {
        let boxes = [
            ([-0.10, -0.02, -0.02], [0.10, 0.02, 0.02]),
            ([0.06, 0.02, -0.02], [0.10, 0.12, 0.02]),
        ];
        ObjectModel { name: "l-shape".into(), points: box_union_surface(&boxes, BUILTIN_POINTS, 0x4c) }
    }

    /// A bar with a bump on top at each end; invariant under the half turn about z.
    pub fn symmetric_bar() -> Self {
        let boxes = [
            ([-0.12, -0.02, -0.02], [0.12, 0.02, 0.02]),
            ([-0.12, -0.02, 0.02], [-0.08, 0.02, 0.05]),
            ([0.08, -0.02, 0.02], [0.12, 0.02, 0.05]),
        ];
        let mut points = box_union_surface(&boxes, BUILTIN_POINTS / 2, 0xba);
        // mirror every point through the half turn so the sampled set is symmetric too
        let mirrored: Vec<Vec3> = points.iter().map(|p| [-p[0], -p[1], p[2]]).collect();
        points.extend(mirrored);
        ObjectModel { name: "bar".into(), points }
    }
}

/// Points drawn uniformly from the outer surface of a union of axis-aligned boxes.
fn box_union_surface(boxes: &[(Vec3, Vec3)], count: usize, seed: u64) -> Vec<Vec3> {
    let inside = |p: Vec3, skip: usize| {
        boxes.iter().enumerate().any(|(i, (lo, hi))| {
            i != skip && (0..3).all(|a| p[a] > lo[a] + 1e-12 && p[a] < hi[a] - 1e-12)
        })
    };
    // faces as (box, axis, side, area)
    let mut faces = Vec::new();
    for (b, (lo, hi)) in boxes.iter().enumerate() {
        for axis in 0..3 {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            let area = (hi[u] - lo[u]) * (hi[v] - lo[v]);
            faces.push((b, axis, false, area));
            faces.push((b, axis, true, area));
        }
    }
    let total: f64 = faces.iter().map(|f| f.3).sum();
    let mut rng = rng(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut pick = rng.random_range(0.0..total);
        let &(b, axis, high, _) = faces
            .iter()
            .find(|f| {
                pick -= f.3;
                pick < 0.0
            })
            .unwrap_or(faces.last().expect("boxes"));
        let (lo, hi) = boxes[b];
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = rng.random_range(lo[a]..hi[a]);
        }
        p[axis] = if high { hi[axis] } else { lo[axis] };
        // a face point is hidden when it lies inside or on the face of another box
        let hidden = boxes.iter().enumerate().any(|(i, (l, h))| {
            i != b && (0..3).all(|a| p[a] >= l[a] - 1e-12 && p[a] <= h[a] + 1e-12)
        });
        if !hidden && !inside(p, b) {
            out.push(p);
        }
    }
    out
}

/// Rotation drawn from the Haar measure on SO(3), canonical (θ ≤ π).
pub fn sample_rotation_uniform(seed: u64) -> AxisAngle {
    let mut rng = rng(seed);
    loop {
        let q: [f64; 4] = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            return AxisAngle::from_unit_quaternion(q.map(|v| v / n));
        }
    }
}

/// One synthetic observation with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub segment: PointCloudSegment,
    pub rotation: AxisAngle,
    pub translation: Vec3,
    /// `1 − visible/total`, the point-count analogue of the mask-pixel ratio.
    pub occlusion_factor: f64,
    pub visible: usize,
    pub total: usize,
    pub object: String,
}

/// Number of points removed for a requested occlusion fraction of `m` points.
/// Products within 1e−9 of an integer are taken as that integer so that
/// fractions built as `c / m` remove exactly `c` points.
pub fn removed_count(occlusion: f64, m: usize) -> usize {
    let x = occlusion * m as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 { r as usize } else { x.ceil() as usize }
}

/// Places `model` at `(r, t)`, hides the points beyond a random plane and adds noise.
///
/// The plane has a uniformly random normal; its offset along the normal is the
/// one that leaves exactly `removed_count(occlusion, m)` points on the far side.
pub fn generate_sample(
    model: &ObjectModel,
    r: AxisAngle,
    t: Vec3,
    occlusion: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Sample> {
    if !(0.0..1.0).contains(&occlusion) {
        return Err(Error::InvalidArgument(format!("occlusion {occlusion} outside [0, 1)")));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma {noise_sigma} must be finite and >= 0")));
    }
    let m = model.len();
    let removed = removed_count(occlusion, m);
    let visible = m.saturating_sub(removed);
    if visible < MIN_VISIBLE {
        return Err(Error::TooMuchOcclusion { occlusion, visible, min: MIN_VISIBLE });
    }
    let r = r.canonicalize();
    let rot = r.to_rotation();
    let placed: Vec<Vec3> = model.points.iter().map(|&x| so3::add(rot.apply(x), t)).collect();

    let mut rng = rng(seed);
    let normal = loop {
        let n: Vec3 = core::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let len = so3::norm(n);
        if len > 1e-12 {
            break so3::scale(n, 1.0 / len);
        }
    };
    let center = so3::add(rot.apply(model.centroid()), t);
    let mut order: Vec<usize> = (0..m).collect();
    let height = |i: usize| so3::dot(so3::sub(placed[i], center), normal);
    order.sort_by(|&a, &b| height(b).total_cmp(&height(a)).then(a.cmp(&b)));
    let mut keep = alloc::vec![true; m];
    for &i in &order[..removed] {
        keep[i] = false;
    }

    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(format!("{e}")))?;
    let mut values = Vec::with_capacity(visible * 3);
    for (p, _) in placed.iter().zip(&keep).filter(|(_, k)| **k) {
        for c in p {
            let jitter = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            values.push(c + jitter);
        }
    }
    let segment = PointCloudSegment::new(values, Default::default(), String::new())?;
    Ok(Sample {
        segment,
        rotation: r,
        translation: t,
        occlusion_factor: (m - visible) as f64 / m as f64,
        visible,
        total: m,
        object: model.name.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct BinCounts {
    #[cfg_attr(feature = "serde", serde(default))]
    pub low: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub moderate: usize,
}

impl BinCounts {
    pub fn total(&self) -> usize {
        self.low + self.moderate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e,
            Split::Test => 0x7465_7374,
        }
    }
}

/// What [`make_dataset`] generates.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub train: BinCounts,
    pub test: BinCounts,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec { train: BinCounts::default(), test: BinCounts::default(), noise_sigma: DEFAULT_NOISE_SIGMA, seed: 0 }
    }
}

/// A generated sample with the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub split: Split,
    pub bin: OcclusionBin,
    pub seed: u64,
    pub requested_occlusion: f64,
    pub noise_sigma: f64,
    pub sample: Sample,
}

/// Removal counts whose fraction of `m` falls in `bin`: `[0, 0.2)` or `[0.2, 0.4]`,
/// further limited to keep [`MIN_VISIBLE`] points.
fn removal_range(bin: OcclusionBin, m: usize) -> Option<(usize, usize)> {
    let boundary = m.div_ceil(5);
    let cap = m.saturating_sub(MIN_VISIBLE);
    let (lo, hi) = match bin {
        OcclusionBin::Low => (0, boundary.saturating_sub(1)),
        OcclusionBin::Moderate => (boundary, (m as f64 * MODERATE_OCCLUSION_MAX).floor() as usize),
    };
    let hi = hi.min(cap);
    (lo <= hi).then_some((lo, hi))
}

/// Draws a random pose inside the camera's view: lateral offsets up to 0.1 m,
/// depth between 0.7 m and 1.0 m.
fn random_translation(rng: &mut impl Rng) -> Vec3 {
    [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(0.7..1.0)]
}

/// Train and test samples with per-sample seeds derived from `spec.seed` on
/// separate streams. Occlusion fractions are drawn uniformly over the removal
/// counts that fall in each requested bin.
pub fn make_dataset(spec: &DatasetSpec, model: &ObjectModel) -> Result<Vec<DatasetEntry>> {
    let mut out = Vec::with_capacity(spec.train.total() + spec.test.total());
    let m = model.len();
    for split in [Split::Train, Split::Test] {
        let counts = match split {
            Split::Train => spec.train,
            Split::Test => spec.test,
        };
        let bins = core::iter::repeat_n(OcclusionBin::Low, counts.low)
            .chain(core::iter::repeat_n(OcclusionBin::Moderate, counts.moderate));
        for (index, bin) in bins.enumerate() {
            let (lo, hi) = removal_range(bin, m).ok_or_else(|| {
                Error::InvalidArgument(format!("a {m}-point model cannot produce {} occlusion", bin.label()))
            })?;
            let seed = derive(spec.seed, split.stream(), index as u64);
            let mut rng = rng(derive(seed, 1, 0));
            let removed = rng.random_range(lo..=hi);
            let t = random_translation(&mut rng);
            let requested_occlusion = removed as f64 / m as f64;
            let rotation = sample_rotation_uniform(derive(seed, 2, 0));
            let mut sample =
                generate_sample(model, rotation, t, requested_occlusion, spec.noise_sigma, derive(seed, 3, 0))?;
            let id = format!("{}-{index:05}", split.label());
            sample.segment.frame_id = id.clone();
            out.push(DatasetEntry { id, split, bin, seed, requested_occlusion, noise_sigma: spec.noise_sigma, sample });
        }
    }
    Ok(out)
}

/// Ray-cast depth image and mask of a sphere; pixels are sampled at their centers.
pub fn render_sphere(center: Vec3, radius: f64, intr: &CameraIntrinsics) -> (DepthImage, Mask) {
    let mut depth = DepthImage::filled(intr.width, intr.height, 0.0);
    let mut mask = Mask::filled(intr.width, intr.height, false);
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = intr.unproject(u as f64, v as f64, 1.0);
            // |s·d − c|² = r² with d = (x, y, 1): smallest root s is the depth
            let a = so3::dot(d, d);
            let b = -2.0 * so3::dot(d, center);
            let c = so3::dot(center, center) - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                continue;
            }
            let s = (-b - disc.sqrt()) / (2.0 * a);
            if s > 0.0 {
                depth.set(u, v, s);
                mask.set(u, v, true);
            }
        }
    }
    (depth, mask)
}
