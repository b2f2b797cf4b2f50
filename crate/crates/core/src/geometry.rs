//! Point-cloud segments: construction from RGB-D + mask, downsampling,
//! translation removal and k-nearest-neighbour graphs.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::so3::Vec3;

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let intr = CameraIntrinsics { fx, fy, cx, cy, width, height };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidArgument("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Continuous pixel coordinates `(u, v)` of a camera-frame point.
    pub fn project(&self, p: Vec3) -> (f64, f64) {
        (self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy)
    }

    /// Point at depth `z` on the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }
}

/// Row-major image; pixel `(u, v)` is column `u`, row `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Image { width, height, data: alloc::vec![value; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(alloc::format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }
}

/// Depth in meters; non-positive or non-finite values are holes.
pub type DepthImage = Image<f64>;
pub type ColorImage = Image<[u8; 3]>;
pub type Mask = Image<bool>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ChannelMode {
    #[default]
    Xyz,
    XyzRgb,
}

impl ChannelMode {
    pub fn dim(self) -> usize {
        match self {
            ChannelMode::Xyz => 3,
            ChannelMode::XyzRgb => 6,
        }
    }

    pub fn from_dim(dim: usize) -> Result<Self> {
        match dim {
            3 => Ok(ChannelMode::Xyz),
            6 => Ok(ChannelMode::XyzRgb),
            d => Err(Error::InvalidArgument(alloc::format!("point dimension must be 3 or 6, got {d}"))),
        }
    }
}

/// Ordered list of points, stored row-major with `mode.dim()` values per point.
/// XYZ in meters, RGB in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudSegment {
    values: Vec<f64>,
    mode: ChannelMode,
    pub frame_id: String,
}

impl PointCloudSegment {
    pub fn new(values: Vec<f64>, mode: ChannelMode, frame_id: impl Into<String>) -> Result<Self> {
        if values.len() % mode.dim() != 0 {
            return Err(Error::Shape(alloc::format!(
                "{} values is not a multiple of the point dimension {}",
                values.len(),
                mode.dim()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(PointCloudSegment { values, mode, frame_id: frame_id.into() })
    }

    pub fn from_xyz(points: &[Vec3], frame_id: impl Into<String>) -> Result<Self> {
        Self::new(points.iter().flatten().copied().collect(), ChannelMode::Xyz, frame_id)
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.mode.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.mode.dim()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn xyz(&self, i: usize) -> Vec3 {
        let p = self.point(i);
        [p[0], p[1], p[2]]
    }

    pub fn points(&self) -> core::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in self.points() {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let n = self.len().max(1) as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Drops RGB channels, keeping XYZ.
    pub fn to_xyz(&self) -> PointCloudSegment {
        if self.mode == ChannelMode::Xyz {
            return self.clone();
        }
        let values = self.points().flat_map(|p| p[..3].iter().copied()).collect();
        PointCloudSegment { values, mode: ChannelMode::Xyz, frame_id: self.frame_id.clone() }
    }
}

/// Builds the segment of masked pixels with valid depth.
///
/// With a color image the segment is XYZRGB (RGB scaled to [0, 1]), otherwise XYZ.
pub fn backproject(
    depth: &DepthImage,
    color: Option<&ColorImage>,
    mask: &Mask,
    intr: &CameraIntrinsics,
) -> Result<PointCloudSegment> {
    intr.validate()?;
    let dims = (intr.width, intr.height);
    let mut mismatched = (depth.width, depth.height) != dims || (mask.width, mask.height) != dims;
    if let Some(c) = color {
        mismatched |= (c.width, c.height) != dims;
    }
    if mismatched {
        return Err(Error::Shape("image sizes do not match the intrinsics".into()));
    }
    let mode = if color.is_some() { ChannelMode::XyzRgb } else { ChannelMode::Xyz };
    let mut values = Vec::new();
    for v in 0..intr.height {
        for u in 0..intr.width {
            if !*mask.get(u, v) {
                continue;
            }
            let z = *depth.get(u, v);
            if !(z.is_finite() && z > 0.0) {
                continue;
            }
            values.extend_from_slice(&intr.unproject(u as f64, v as f64, z));
            if let Some(c) = color {
                let rgb = c.get(u, v);
                values.extend(rgb.iter().map(|&x| f64::from(x) / 255.0));
            }
        }
    }
    if values.is_empty() {
        return Err(Error::EmptySegment);
    }
    PointCloudSegment::new(values, mode, String::new())
}

/// Fixed-size random subset of `n` points.
///
/// With at least `n` points the subset is uniform without replacement. With fewer,
/// every input point is kept once and the remainder is drawn with replacement, so
/// the output always covers the whole input.
pub fn downsample(seg: &PointCloudSegment, n: usize, seed: u64) -> Result<PointCloudSegment> {
    if seg.is_empty() {
        return Err(Error::Empty("segment"));
    }
    let mut rng = crate::rng::rng(seed);
    let m = seg.len();
    let picks: Vec<usize> = if m >= n {
        index::sample(&mut rng, m, n).into_vec()
    } else {
        let mut picks: Vec<usize> = (0..m).collect();
        picks.extend((m..n).map(|_| rng.random_range(0..m)));
        picks
    };
    let mut values = Vec::with_capacity(n * seg.dim());
    for i in picks {
        values.extend_from_slice(seg.point(i));
    }
    Ok(PointCloudSegment { values, mode: seg.mode, frame_id: seg.frame_id.clone() })
}

/// Subtracts `t` from the XYZ channels of every point.
pub fn remove_translation(seg: &PointCloudSegment, t: Vec3) -> PointCloudSegment {
    let d = seg.dim();
    let mut values = seg.values.clone();
    for p in values.chunks_exact_mut(d) {
        for k in 0..3 {
            p[k] -= t[k];
        }
    }
    PointCloudSegment { values, mode: seg.mode, frame_id: seg.frame_id.clone() }
}

/// Directed kNN graph with edge features `[P_i, P_j − P_i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    /// Point feature dimension D; each edge feature has 2·D values.
    pub dim: usize,
    /// `neighbors[i * k + r]` is the r-th nearest neighbour of point i.
    pub neighbors: Vec<usize>,
    /// Row-major `[n · k, 2 · dim]`.
    pub edge_features: Vec<f64>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    pub fn edge_feature(&self, i: usize, r: usize) -> &[f64] {
        let w = 2 * self.dim;
        let e = i * self.k + r;
        &self.edge_features[e * w..(e + 1) * w]
    }
}

/// kNN graph over all channels of the segment's points.
pub fn knn_graph(seg: &PointCloudSegment, k: usize) -> Result<KnnGraph> {
    let dim = seg.dim();
    let neighbors = knn_indices(seg.values(), dim, k)?;
    let mut edge_features = Vec::with_capacity(neighbors.len() * 2 * dim);
    for (e, &j) in neighbors.iter().enumerate() {
        let pi = seg.point(e / k);
        let pj = seg.point(j);
        edge_features.extend_from_slice(pi);
        edge_features.extend(pj.iter().zip(pi).map(|(a, b)| a - b));
    }
    Ok(KnnGraph { k, dim, neighbors, edge_features })
}

/// For each of the `n = values.len() / dim` points, the indices of its `k`
/// nearest other points by Euclidean distance, nearest first. Ties go to the
/// lower index.
pub fn knn_indices(values: &[f64], dim: usize, k: usize) -> Result<Vec<usize>> {
    if dim == 0 || values.len() % dim != 0 {
        return Err(Error::Shape("point buffer is not a multiple of the dimension".into()));
    }
    let n = values.len() / dim;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if n <= k {
        return Err(Error::TooFewPoints { needed: k, got: n });
    }
    // channel-major copy so a whole row of distances accumulates one channel at a
    // time; each distance still sums its channels in order
    let mut cols = alloc::vec![0.0; n * dim];
    for (i, p) in values.chunks_exact(dim).enumerate() {
        for (ch, &v) in p.iter().enumerate() {
            cols[ch * n + i] = v;
        }
    }
    // upper triangle only; the lower part of row i is column i of earlier rows
    let mut dist = alloc::vec![0.0; n * n];
    let mut out = Vec::with_capacity(n * k);
    // sorted (distance, index) list of the k best so far; scanning j upwards means a
    // later candidate only displaces strictly nearer ones, which keeps the tie rule
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for (i, pi) in values.chunks_exact(dim).enumerate() {
        let (done, rest) = dist.split_at_mut(i * n);
        let row = &mut rest[..n];
        for j in 0..i {
            row[j] = done[j * n + i];
        }
        for (col, &a) in cols.chunks_exact(n).zip(pi) {
            for (d, &b) in row[i + 1..].iter_mut().zip(&col[i + 1..]) {
                *d += (a - b) * (a - b);
            }
        }
        let row = &*row;
        best.clear();
        for (j, &d) in row.iter().enumerate() {
            if j == i || (best.len() == k && d.total_cmp(&best[k - 1].0).is_ge()) {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd.total_cmp(&d).is_le());
            best.insert(pos, (d, j));
            best.truncate(k);
        }
        out.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn intr(fx: f64, cx: f64, w: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(fx, fx, cx, cx, w, w).unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
    }

    #[test]
    fn backproject_principal_ray() {
        let k = intr(500.0, 2.0, 5);
        let mut depth = Image::filled(5, 5, 0.0);
        let mut mask = Image::filled(5, 5, false);
        depth.set(2, 2, 2.0);
        mask.set(2, 2, true);
        let seg = backproject(&depth, None, &mask, &k).unwrap();
        assert_eq!(seg.len(), 1);
        assert_eq!(seg.point(0), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backproject_unit_tangent_and_color() {
        let k = CameraIntrinsics::new(500.0, 500.0, 0.0, 0.0, 501, 2).unwrap();
        let mut depth = Image::filled(501, 2, 1.0);
        let mut mask = Image::filled(501, 2, false);
        let mut color = Image::filled(501, 2, [0u8, 0, 0]);
        mask.set(500, 0, true);
        color.set(500, 0, [255, 0, 51]);
        // a masked hole is skipped
        mask.set(3, 1, true);
        depth.set(3, 1, f64::NAN);
        let seg = backproject(&depth, Some(&color), &mask, &k).unwrap();
        assert_eq!(seg.mode(), ChannelMode::XyzRgb);
        assert_eq!(seg.point(0), &[1.0, 0.0, 1.0, 1.0, 0.0, 0.2]);
        assert_eq!(seg.len(), 1);
    }

    #[test]
    fn backproject_empty_is_error() {
        let k = intr(100.0, 1.0, 3);
        let depth = Image::filled(3, 3, -1.0);
        let mask = Image::filled(3, 3, true);
        assert_eq!(backproject(&depth, None, &mask, &k), Err(Error::EmptySegment));
    }

    #[test]
    fn backproject_then_project_recovers_pixels() {
        let k = CameraIntrinsics::new(525.0, 520.0, 319.5, 239.5, 640, 480).unwrap();
        let mut depth = Image::filled(640, 480, 0.0);
        let mut mask = Image::filled(640, 480, false);
        let pixels = [(0usize, 0usize), (639, 479), (100, 300), (320, 240)];
        for (i, &(u, v)) in pixels.iter().enumerate() {
            depth.set(u, v, 0.5 + i as f64 * 0.37);
            mask.set(u, v, true);
        }
        let seg = backproject(&depth, None, &mask, &k).unwrap();
        let mut projected: Vec<(f64, f64)> = (0..seg.len()).map(|i| k.project(seg.xyz(i))).collect();
        projected.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        let mut expected: Vec<(f64, f64)> = pixels.iter().map(|&(u, v)| (u as f64, v as f64)).collect();
        expected.sort_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).unwrap());
        for (p, e) in projected.iter().zip(&expected) {
            assert!((p.0 - e.0).abs() < 1e-9 && (p.1 - e.1).abs() < 1e-9);
        }
    }

    fn sorted_points(seg: &PointCloudSegment) -> Vec<Vec<f64>> {
        let mut pts: Vec<Vec<f64>> = seg.points().map(|p| p.to_vec()).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts
    }

    fn random_segment(n: usize, seed: u64) -> PointCloudSegment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        PointCloudSegment::new(values, ChannelMode::Xyz, "r").unwrap()
    }

    #[test]
    fn downsample_exhaustive_is_permutation() {
        let seg = random_segment(256, 1);
        let out = downsample(&seg, 256, 9).unwrap();
        assert_eq!(sorted_points(&out), sorted_points(&seg));
    }

    #[test]
    fn downsample_is_deterministic() {
        let seg = random_segment(10_000, 2);
        let a = downsample(&seg, 256, 5).unwrap();
        let b = downsample(&seg, 256, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 256);
        assert_ne!(a, downsample(&seg, 256, 6).unwrap());
    }

    #[test]
    fn downsample_with_replacement_covers_input() {
        let seg = random_segment(100, 3);
        let out = downsample(&seg, 256, 4).unwrap();
        assert_eq!(out.len(), 256);
        let mut support = sorted_points(&out);
        support.dedup();
        assert_eq!(support, sorted_points(&seg));
    }

    #[test]
    fn downsample_rejects_empty() {
        let seg = PointCloudSegment::new(vec![], ChannelMode::Xyz, "").unwrap();
        assert!(downsample(&seg, 4, 0).is_err());
    }

    #[test]
    fn remove_translation_cases() {
        let seg = random_segment(50, 5);
        assert_eq!(remove_translation(&seg, [0.0; 3]), seg);
        let one = PointCloudSegment::from_xyz(&[[1.0, 2.0, 3.0]], "").unwrap();
        assert_eq!(remove_translation(&one, [1.0, 2.0, 3.0]).point(0), &[0.0, 0.0, 0.0]);
        let t = [0.3, -1.2, 7.0];
        let c0 = seg.centroid();
        let c1 = remove_translation(&seg, t).centroid();
        for k in 0..3 {
            assert!((c1[k] - (c0[k] - t[k])).abs() < 1e-12);
        }
        let rgb = PointCloudSegment::new(vec![1.0, 1.0, 1.0, 0.5, 0.6, 0.7], ChannelMode::XyzRgb, "").unwrap();
        assert_eq!(remove_translation(&rgb, [1.0; 3]).point(0), &[0.0, 0.0, 0.0, 0.5, 0.6, 0.7]);
    }

    #[test]
    fn knn_on_a_line() {
        let seg = PointCloudSegment::from_xyz(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]], "").unwrap();
        let g = knn_graph(&seg, 1).unwrap();
        assert_eq!(g.neighbors, vec![1, 0, 1]);
        assert_eq!(g.edge_feature(2, 0), &[3.0, 0.0, 0.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_duplicates_and_ties() {
        let seg = PointCloudSegment::from_xyz(
            &[[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
            "",
        )
        .unwrap();
        let g = knn_graph(&seg, 2).unwrap();
        assert_eq!(g.neighbors_of(0), &[1, 2]);
        assert_eq!(g.neighbors_of(1), &[0, 2]);
        for i in 0..4 {
            assert!(!g.neighbors_of(i).contains(&i));
        }
    }

    #[test]
    fn knn_requires_more_points_than_k() {
        let seg = random_segment(5, 6);
        assert!(matches!(knn_graph(&seg, 5), Err(Error::TooFewPoints { .. })));
        assert!(knn_graph(&seg, 4).is_ok());
    }
}
