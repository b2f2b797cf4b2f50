//! The two rotation-regression encoders.
//!
//! * PN: a shared per-point MLP, max pooling into a global feature and a
//!   fully-connected head.
//! * DG: edge convolutions over kNN graphs rebuilt in each stage's input feature
//!   space, then the same global layer, pooling and head as PN.
//!
//! Every hidden layer is `linear → batch norm → ReLU`; the last head layer is a
//! bare linear map producing the unconstrained axis-angle vector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{knn_indices, PointCloudSegment};
use crate::so3::AxisAngle;
use crate::tensor::{BatchNormState, Graph, Mode, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Variant {
    #[cfg_attr(feature = "serde", serde(rename = "pn"))]
    PointNet,
    #[cfg_attr(feature = "serde", serde(rename = "dg"))]
    DynamicGraph,
}

/// Layer widths and input contract of a model.
///
/// `point_mlp_dims` are the shared per-point layers (PN) or the edge-convolution
/// stages (DG); both are followed by one per-point layer of width
/// `global_feature_dim` that is max-pooled over points.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub point_mlp_dims: Vec<usize>,
    pub global_feature_dim: usize,
    pub head_dims: Vec<usize>,
    pub k: usize,
    pub input_dim: usize,
    pub num_points: usize,
}

impl ArchitectureSpec {
    pub const DEFAULT_POINTS: usize = 256;
    pub const DEFAULT_K: usize = 10;

    /// PointNet widths: per-point (64, 64, 64, 128) then 1024, head (512, 256, 3).
    pub fn pointnet() -> Self {
        ArchitectureSpec {
            variant: Variant::PointNet,
            point_mlp_dims: alloc::vec![64, 64, 64, 128],
            global_feature_dim: 1024,
            head_dims: alloc::vec![512, 256, 3],
            k: Self::DEFAULT_K,
            input_dim: 3,
            num_points: Self::DEFAULT_POINTS,
        }
    }

    /// Two edge-convolution stages (64, 128), global 1024, head (512, 256, 3), k = 10.
    pub fn dynamic_graph() -> Self {
        ArchitectureSpec {
            variant: Variant::DynamicGraph,
            point_mlp_dims: alloc::vec![64, 128],
            ..Self::pointnet()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.head_dims.last() != Some(&3) {
            return bad(format!("head must end in 3 outputs, got {:?}", self.head_dims));
        }
        let widths = self.point_mlp_dims.iter().chain(&self.head_dims).chain([&self.global_feature_dim]);
        if widths.into_iter().any(|&w| w == 0) {
            return bad("all layer widths must be at least 1".into());
        }
        if !matches!(self.input_dim, 3 | 6) {
            return bad(format!("input_dim must be 3 or 6, got {}", self.input_dim));
        }
        if self.num_points == 0 {
            return bad("num_points must be positive".into());
        }
        if self.variant == Variant::DynamicGraph {
            if self.k == 0 {
                return bad("DG needs k >= 1".into());
            }
            if self.num_points <= self.k {
                return bad(format!("DG needs more than k = {} points", self.k));
            }
            if self.point_mlp_dims.is_empty() {
                return bad("DG needs at least one edge-convolution stage".into());
            }
        }
        Ok(())
    }
}

/// `linear → [batch norm → ReLU]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub norm: Option<BatchNormState>,
}

impl Dense {
    fn init(cin: usize, cout: usize, normalized: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (cin as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::new(alloc::vec![cin, cout], draw(cin * cout)).expect("sized");
        let bias = Tensor::new(alloc::vec![cout], draw(cout)).expect("sized");
        Dense { weight, bias, norm: normalized.then(|| BatchNormState::new(cout)) }
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub output: Var,
    /// Pooled global feature `[B, global_feature_dim]`.
    pub global: Var,
    /// Leaves in [`Model::parameters`] order.
    pub params: Vec<Var>,
    /// Batch-norm nodes, one per normalized layer in model order.
    norm_nodes: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub point_layers: Vec<Dense>,
    pub global_layer: Dense,
    pub head: Vec<Dense>,
}

impl Model {
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = crate::rng::rng(seed);
        let edge = spec.variant == Variant::DynamicGraph;
        let mut cin = spec.input_dim;
        let mut point_layers = Vec::new();
        for &w in &spec.point_mlp_dims {
            let fan_in = if edge { 2 * cin } else { cin };
            point_layers.push(Dense::init(fan_in, w, true, &mut rng));
            cin = w;
        }
        let global_layer = Dense::init(cin, spec.global_feature_dim, true, &mut rng);
        let mut head = Vec::new();
        let mut cin = spec.global_feature_dim;
        for (i, &w) in spec.head_dims.iter().enumerate() {
            let last = i + 1 == spec.head_dims.len();
            head.push(Dense::init(cin, w, !last, &mut rng));
            cin = w;
        }
        Ok(Model { spec, point_layers, global_layer, head })
    }

    /// Rebuilds a model from stored layers, checking them against `spec`.
    pub fn from_parts(spec: ArchitectureSpec, point_layers: Vec<Dense>, global_layer: Dense, head: Vec<Dense>) -> Result<Self> {
        let model = Model { spec, point_layers, global_layer, head };
        let reference = Model::new(model.spec.clone(), 0)?;
        let shapes = |m: &Model| -> Vec<(String, Vec<usize>)> {
            m.parameters().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect()
        };
        if shapes(&model) != shapes(&reference) {
            return Err(Error::Shape("parameter shapes do not match the architecture".into()));
        }
        for (name, n) in model.norm_states() {
            let c = n.gamma.len();
            if n.running_mean.len() != c || n.running_var.len() != c {
                return Err(Error::Shape(format!("{name}: running statistics do not match {c} channels")));
            }
        }
        Ok(model)
    }

    fn layers(&self) -> impl Iterator<Item = (String, &Dense)> {
        let points = self.point_layers.iter().enumerate().map(|(i, l)| (format!("point.{i}"), l));
        let global = core::iter::once((String::from("global"), &self.global_layer));
        let head = self.head.iter().enumerate().map(|(i, l)| (format!("head.{i}"), l));
        points.chain(global).chain(head)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point_layers.iter_mut().chain(core::iter::once(&mut self.global_layer)).chain(self.head.iter_mut())
    }

    /// Named trainable tensors in a fixed order: per layer weight, bias and, when
    /// normalized, gamma and beta.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            out.push((format!("{name}.weight"), &layer.weight));
            out.push((format!("{name}.bias"), &layer.bias));
            if let Some(n) = &layer.norm {
                out.push((format!("{name}.bn.gamma"), &n.gamma));
                out.push((format!("{name}.bn.beta"), &n.beta));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
            if let Some(n) = &mut layer.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        self.parameters().iter().map(|(_, t)| t.len()).collect()
    }

    /// Named batch-norm states in layer order.
    pub fn norm_states(&self) -> Vec<(String, &BatchNormState)> {
        self.layers().filter_map(|(name, l)| l.norm.as_ref().map(|n| (name, n))).collect()
    }

    pub fn norm_states_mut(&mut self) -> Vec<&mut BatchNormState> {
        self.layers_mut().filter_map(|l| l.norm.as_mut()).collect()
    }

    /// Records the forward pass for `x: [B, N, D]`.
    pub fn forward(&self, g: &mut Graph, x: Tensor, mode: Mode) -> Result<Forward> {
        let shape = x.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "expected [B, N, {}] input, got {shape:?}",
                self.spec.input_dim
            )));
        }
        if self.spec.variant == Variant::DynamicGraph && shape[1] <= self.spec.k {
            return Err(Error::TooFewPoints { needed: self.spec.k, got: shape[1] });
        }
        let mut ctx = Ctx { g, mode, params: Vec::new(), norm_nodes: Vec::new() };
        let (b, n) = (shape[0], shape[1]);
        let mut h = ctx.g.leaf(x);
        for (stage, layer) in self.point_layers.iter().enumerate() {
            h = match self.spec.variant {
                Variant::PointNet => ctx.dense(h, layer)?,
                Variant::DynamicGraph => ctx.edge_conv(h, layer, self.spec.k, stage == 0)?,
            };
        }
        let (w, bias) = ctx.leaves(&self.global_layer);
        let h = ctx.g.linear(h, w, bias)?;
        let global = ctx.finish_pooled(h, &self.global_layer)?;
        let mut out = global;
        for layer in &self.head {
            out = ctx.dense(out, layer)?;
        }
        debug_assert_eq!(ctx.g.value(out).shape(), [b, 3]);
        let _ = n;
        Ok(Forward { output: out, global, params: ctx.params, norm_nodes: ctx.norm_nodes })
    }

    /// Folds the train-mode batch statistics of `fwd` into the running statistics.
    pub fn update_norm_stats(&mut self, g: &Graph, fwd: &Forward) {
        for (state, node) in self.norm_states_mut().into_iter().zip(&fwd.norm_nodes) {
            if let Some((mean, var)) = g.batch_stats(*node) {
                state.update_running(mean, var);
            }
        }
    }

    /// Eval-mode predictions `[B, 3]` for a stacked input.
    pub fn predict_tensor(&self, x: Tensor) -> Result<Vec<AxisAngle>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(fwd.output).data().chunks_exact(3).map(|r| AxisAngle([r[0], r[1], r[2]])).collect())
    }

    /// Axis-angle prediction for one downsampled, translation-free segment.
    pub fn predict_rotation(&self, seg: &PointCloudSegment) -> Result<AxisAngle> {
        let x = stack_segments(core::slice::from_ref(seg), &self.spec)?;
        Ok(self.predict_tensor(x)?[0])
    }

    /// Mean geodesic loss over the batch with gradients for every parameter (in
    /// [`Model::parameters`] order). Runs in train mode and updates the running
    /// batch-norm statistics.
    pub fn training_loss(&mut self, x: Tensor, targets: &[AxisAngle]) -> Result<(f64, Vec<Vec<f64>>)> {
        if targets.len() < 2 {
            return Err(Error::BatchTooSmall(targets.len()));
        }
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, x, Mode::Train)?;
        let loss = g.geodesic_loss(fwd.output, targets)?;
        g.backward(loss);
        let value = g.value(loss).data()[0];
        let grads = fwd.params.iter().map(|p| g.grad_or_zeros(*p)).collect();
        self.update_norm_stats(&g, &fwd);
        Ok((value, grads))
    }
}

struct Ctx<'g> {
    g: &'g mut Graph,
    mode: Mode,
    params: Vec<Var>,
    norm_nodes: Vec<Var>,
}

impl Ctx<'_> {
    fn leaves(&mut self, layer: &Dense) -> (Var, Var) {
        let w = self.g.leaf(layer.weight.clone());
        let b = self.g.leaf(layer.bias.clone());
        self.params.push(w);
        self.params.push(b);
        (w, b)
    }

    fn norm_leaves(&mut self, norm: &BatchNormState) -> (Var, Var) {
        let gamma = self.g.leaf(norm.gamma.clone());
        let beta = self.g.leaf(norm.beta.clone());
        self.params.push(gamma);
        self.params.push(beta);
        (gamma, beta)
    }

    fn finish(&mut self, y: Var, layer: &Dense) -> Result<Var> {
        let Some(norm) = &layer.norm else { return Ok(y) };
        let (gamma, beta) = self.norm_leaves(norm);
        let y = self.g.batch_norm(y, gamma, beta, norm, self.mode)?;
        self.norm_nodes.push(y);
        Ok(self.g.relu(y))
    }

    /// [`Ctx::finish`] followed by a max over the second-to-last axis, fused.
    fn finish_pooled(&mut self, y: Var, layer: &Dense) -> Result<Var> {
        let Some(norm) = &layer.norm else { return self.g.max_pool(y) };
        let (gamma, beta) = self.norm_leaves(norm);
        let y = self.g.norm_relu_max(y, gamma, beta, norm, self.mode)?;
        self.norm_nodes.push(y);
        Ok(y)
    }

    fn dense(&mut self, x: Var, layer: &Dense) -> Result<Var> {
        let (w, b) = self.leaves(layer);
        let y = self.g.linear(x, w, b)?;
        self.finish(y, layer)
    }

    /// kNN in the current feature space, shared MLP on edges, max over each point's edges.
    fn edge_conv(&mut self, x: Var, layer: &Dense, k: usize, input_stage: bool) -> Result<Var> {
        let xv = self.g.value(x);
        let (b, n, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut neighbors = Vec::with_capacity(b * n * k);
        for sample in xv.data().chunks_exact(n * c) {
            neighbors.extend(stage_neighbors(sample, c, k, input_stage)?);
        }
        let (w, bias) = self.leaves(layer);
        let Some(norm) = &layer.norm else {
            let e = self.g.edge_linear(x, neighbors, k, w, bias)?;
            return self.g.max_pool(e);
        };
        let (gamma, beta) = self.norm_leaves(norm);
        let y = self.g.edge_conv_pool(x, neighbors, k, w, bias, gamma, beta, norm, self.mode)?;
        self.norm_nodes.push(y);
        Ok(y)
    }
}

/// Neighbour lists of one sample's `[N, C]` features. The input stage measures
/// distances on XYZ only, later stages on the full feature vector.
pub(crate) fn stage_neighbors(sample: &[f64], c: usize, k: usize, input_stage: bool) -> Result<Vec<usize>> {
    if input_stage && c > 3 {
        let xyz: Vec<f64> = sample.chunks_exact(c).flat_map(|p| p[..3].iter().copied()).collect();
        knn_indices(&xyz, 3, k)
    } else {
        knn_indices(sample, c, k)
    }
}

/// Stacks segments into a `[B, N, D]` tensor, checking them against `spec`.
/// XYZRGB segments are reduced to XYZ for 3-channel models.
pub fn stack_segments(segs: &[PointCloudSegment], spec: &ArchitectureSpec) -> Result<Tensor> {
    let mut data = Vec::with_capacity(segs.len() * spec.num_points * spec.input_dim);
    for seg in segs {
        if seg.len() != spec.num_points {
            return Err(Error::Shape(format!(
                "segment {:?} has {} points, model expects {}",
                seg.frame_id,
                seg.len(),
                spec.num_points
            )));
        }
        match (seg.dim(), spec.input_dim) {
            (a, b) if a == b => data.extend_from_slice(seg.values()),
            (6, 3) => data.extend(seg.points().flat_map(|p| p[..3].iter().copied())),
            (a, b) => {
                return Err(Error::Shape(format!("segment has {a} channels, model expects {b}")));
            }
        }
    }
    Tensor::new(alloc::vec![segs.len(), spec.num_points, spec.input_dim], data)
}
