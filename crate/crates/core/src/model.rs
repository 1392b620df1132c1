//! The two-branch multi-view classifier.
//!
//! Every view of a sample goes through one shared backbone. The per-view
//! feature maps are fused across views (element-wise max by default), then
//! classified twice: once from a global average pool, once from horizontal
//! strip maxima at several scales, each strip with its own dense map and
//! batch norm.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{kaiming_uniform, Backbone, BackboneConfig, BatchNorm, Conv2d, Depth, Linear, ParamId, ParamStore};
use crate::ops::{softmax_rows, Mode};
use crate::project::{DepthImageStack, ViewSetKind};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{mismatch, Tensor, TensorError};

/// How per-view feature maps are merged into one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ViewPooling {
    /// Element-wise maximum over all views.
    #[default]
    Depth,
    /// Element-wise mean over all views.
    Average,
    /// Maxima over fixed view pairs and triplets, fused by a 1×1 convolution.
    View,
}

/// View groups used by [`ViewPooling::View`], as indices into the
/// `Orthogonal6` order (right, left, front, back, top, bottom):
/// left-right, top-bottom, front-back, top-front-left, bottom-back-right.
pub const VIEW_POOL_GROUPS: [&[usize]; 5] = [&[0, 1], &[4, 5], &[2, 3], &[1, 2, 4], &[0, 3, 5]];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub view_set: ViewSetKind,
    #[serde(default)]
    pub view_pooling: ViewPooling,
    pub mmp_scales: Vec<usize>,
    pub strip_dim: usize,
    pub num_classes: usize,
    #[serde(default = "unit_weight")]
    pub lambda1: f64,
    #[serde(default = "unit_weight")]
    pub lambda2: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl ModelConfig {
    /// Small profile used for tests and the synthetic experiments:
    /// width 16, 64-pixel views (4×4 feature maps), strip scales 1, 2, 4.
    pub fn desk(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig { depth: Depth::D18, width: 16, in_channels: 1, resolution: 64 },
            view_set: ViewSetKind::Orthogonal6,
            view_pooling: ViewPooling::Depth,
            mmp_scales: vec![1, 2, 4],
            strip_dim: 64,
            num_classes,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }

    /// Full-size profile: 256 channels on an 8×8 map, strip scales 1, 2, 4, 8.
    pub fn paper(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig { depth: Depth::D18, width: 64, in_channels: 1, resolution: 128 },
            view_set: ViewSetKind::Orthogonal6,
            view_pooling: ViewPooling::Depth,
            mmp_scales: vec![1, 2, 4, 8],
            strip_dim: 256,
            num_classes,
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }

    pub fn num_strips(&self) -> usize {
        self.mmp_scales.iter().sum()
    }

    pub fn num_views(&self) -> usize {
        self.view_set.num_views()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        self.backbone.validate()?;
        let (h, _) = self.backbone.out_spatial();
        let bad: Vec<usize> = self.mmp_scales.iter().copied().filter(|&n| n == 0 || h % n != 0).collect();
        if self.mmp_scales.is_empty() || !bad.is_empty() {
            return Err(TensorError::BadScale(bad, h));
        }
        if self.strip_dim == 0 {
            return Err(TensorError::BadConfig("strip_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(TensorError::BadConfig("need at least 2 classes".into()));
        }
        check_weights(self.lambda1, self.lambda2)?;
        if self.view_pooling == ViewPooling::View && self.view_set != ViewSetKind::Orthogonal6 {
            return Err(TensorError::WrongViewCount(self.num_views()));
        }
        Ok(())
    }
}

fn check_weights(l1: f64, l2: f64) -> Result<(), TensorError> {
    if !(l1 >= 0.0 && l2 >= 0.0 && l1 + l2 > 0.0 && l1.is_finite() && l2.is_finite()) {
        return Err(TensorError::BadWeights(l1, l2));
    }
    Ok(())
}

/// Element-wise max over views. `features` is `(B·V)×C×H×W`.
pub fn depth_pool<T: Scalar>(g: &mut Graph<T>, features: Var, views: usize) -> Result<Var, TensorError> {
    let all: Vec<usize> = (0..views).collect();
    g.view_group_max(features, views, &[all])
}

/// Element-wise mean over views.
pub fn average_pool_views<T: Scalar>(g: &mut Graph<T>, features: Var, views: usize) -> Result<Var, TensorError> {
    g.view_mean(features, views)
}

/// Pair/triplet maxima of six canonical views, concatenated to `B×5C×H×W`
/// (before the fusing convolution).
pub fn view_group_maxima<T: Scalar>(g: &mut Graph<T>, features: Var, views: usize) -> Result<Var, TensorError> {
    if views != 6 {
        return Err(TensorError::WrongViewCount(views));
    }
    let groups: Vec<Vec<usize>> = VIEW_POOL_GROUPS.iter().map(|g| g.to_vec()).collect();
    g.view_group_max(features, views, &groups)
}

/// Strip embeddings: `P` strips of dimension `d` per sample, flattened
/// strip-major into `B×(P·d)`.
#[derive(Clone, Copy, Debug)]
pub struct MmpOutput {
    pub strips: Var,
    pub num_strips: usize,
    pub strip_dim: usize,
}

#[derive(Clone, Debug)]
pub struct Mmp {
    pub scales: Vec<usize>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
    pub bn: BatchNorm,
    pub strip_dim: usize,
}

impl Mmp {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, scales: &[usize], strip_dim: usize, rng: &mut Rng) -> Self {
        let p: usize = scales.iter().sum();
        Self {
            scales: scales.to_vec(),
            fc_weight: store.add(format!("{name}.fc.weight"), kaiming_uniform(&[p, strip_dim, channels], channels, rng), true),
            fc_bias: store.add(format!("{name}.fc.bias"), Tensor::zeros(&[p, strip_dim]), true),
            bn: BatchNorm::new(store, &format!("{name}.bn"), p * strip_dim),
            strip_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<MmpOutput, TensorError> {
        let pooled = g.strip_max(x, &self.scales)?;
        let w = g.param(store, self.fc_weight);
        let b = g.param(store, self.fc_bias);
        let h = g.grouped_linear(pooled, w, b)?;
        let strips = self.bn.forward(g, store, h, mode)?;
        Ok(MmpOutput { strips, num_strips: self.scales.iter().sum(), strip_dim: self.strip_dim })
    }
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Logits {
    /// Average-pool branch, `B×N`.
    pub global: Var,
    /// Strip branch, `B×N`.
    pub strips: Var,
}

#[derive(Clone, Debug)]
pub struct DgMvp<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    backbone: Backbone,
    view_fuse: Option<Conv2d>,
    head_global: Linear,
    mmp: Mmp,
    head_strips: Linear,
}

impl<T: Scalar> DgMvp<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, TensorError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let backbone = Backbone::build(&config.backbone, &mut params, "backbone", rng)?;
        let c = config.backbone.out_channels();
        let view_fuse = (config.view_pooling == ViewPooling::View)
            .then(|| Conv2d::new(&mut params, "view_pool.fuse", 5 * c, c, 1, 1, 0, true, rng));
        let head_global = Linear::new(&mut params, "head_global", c, config.num_classes, rng);
        let mmp = Mmp::new(&mut params, "mmp", c, &config.mmp_scales, config.strip_dim, rng);
        let head_strips = Linear::new(&mut params, "head_strips", config.num_strips() * config.strip_dim, config.num_classes, rng);
        Ok(Self { config, params, backbone, view_fuse, head_global, mmp, head_strips })
    }

    /// Same architecture, parameters converted to another element type.
    pub fn cast<U: Scalar>(&self) -> DgMvp<U> {
        DgMvp {
            config: self.config.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            view_fuse: self.view_fuse.clone(),
            head_global: self.head_global.clone(),
            mmp: self.mmp.clone(),
            head_strips: self.head_strips.clone(),
        }
    }

    /// Packs depth stacks into the sample-major `(B·V)×1×R×R` input.
    pub fn input_tensor(&self, stacks: &[&DepthImageStack]) -> Result<Tensor<T>, TensorError> {
        let r = self.config.backbone.resolution;
        let v = self.config.num_views();
        let mut data = Vec::with_capacity(stacks.len() * v * r * r);
        for s in stacks {
            if s.resolution != r || s.num_views() != v {
                return Err(mismatch("input stack", format!("[{v}, 1, {r}, {r}]"), &s.shape()));
            }
            data.extend(s.data.iter().map(|&p| T::from_f32(p).expect("pixel")));
        }
        Tensor::from_vec(&[stacks.len() * v, 1, r, r], data)
    }

    /// Shared backbone and view fusion: `(B·V)×1×R×R → B×C×h×w`.
    pub fn fused_features(&mut self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<Var, TensorError> {
        let views = self.config.num_views();
        let store = &mut self.params;
        let per_view = self.backbone.forward(g, store, input, mode)?;
        match self.config.view_pooling {
            ViewPooling::Depth => depth_pool(g, per_view, views),
            ViewPooling::Average => average_pool_views(g, per_view, views),
            ViewPooling::View => {
                let grouped = view_group_maxima(g, per_view, views)?;
                self.view_fuse.as_ref().expect("built for view pooling").forward(g, store, grouped)
            }
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, input: Var, mode: Mode) -> Result<Logits, TensorError> {
        let fused = self.fused_features(g, input, mode)?;
        let store = &mut self.params;
        let pooled = g.global_avg_pool(fused)?;
        let global = self.head_global.forward(g, store, pooled)?;
        let mmp = self.mmp.forward(g, store, fused, mode)?;
        let strips = self.head_strips.forward(g, store, mmp.strips)?;
        Ok(Logits { global, strips })
    }

    pub fn mmp(&self) -> &Mmp {
        &self.mmp
    }

    /// Forward pass on plain tensors, returning both logit matrices.
    pub fn logits(&mut self, input: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let out = self.forward(&mut g, x, mode)?;
        Ok((g.value(out.global).clone(), g.value(out.strips).clone()))
    }

    /// Inference-mode class decisions for a batch of stacks.
    pub fn predict(&mut self, stacks: &[&DepthImageStack]) -> Result<Vec<Prediction>, TensorError> {
        let input = self.input_tensor(stacks)?;
        let (l1, l2) = self.logits(input, Mode::Eval)?;
        Ok(fuse_predictions(l1.data(), l2.data(), self.config.num_classes))
    }
}

/// `λ₁·CE(global) + λ₂·CE(strips)`.
pub fn combined_loss<T: Scalar>(g: &mut Graph<T>, logits: Logits, targets: &[usize], lambda1: f64, lambda2: f64) -> Result<Var, TensorError> {
    check_weights(lambda1, lambda2)?;
    let ce1 = g.cross_entropy(logits.global, targets)?;
    let ce2 = g.cross_entropy(logits.strips, targets)?;
    let a = g.scale(ce1, T::from_f64_lossy(lambda1));
    let b = g.scale(ce2, T::from_f64_lossy(lambda2));
    g.add(a, b)
}

/// Decision for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    /// Argmax of the summed branch softmaxes.
    pub class: usize,
    pub global_argmax: usize,
    pub strips_argmax: usize,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Summed-softmax fusion of the two branches; ties go to the lower class.
pub fn fuse_predictions<T: Scalar>(global: &[T], strips: &[T], classes: usize) -> Vec<Prediction> {
    let p1 = softmax_rows(global, classes);
    let p2 = softmax_rows(strips, classes);
    p1.chunks(classes)
        .zip(p2.chunks(classes))
        .zip(global.chunks(classes).zip(strips.chunks(classes)))
        .map(|((a, b), (ga, sb))| {
            let sum: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x + y).collect();
            Prediction { class: argmax(&sum), global_argmax: argmax(ga), strips_argmax: argmax(sb) }
        })
        .collect()
}
