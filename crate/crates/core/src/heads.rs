//! The coupled detection head and the toy backbone feeding it.
//!
//! Per proposal the local branch pools position-sensitive score maps and votes, the
//! global branch max-pools a reduced feature map (optionally with a context region)
//! through a `k x k` then `1 x 1` convolution pair, and the two `(C+1)`-vectors (and
//! the class-agnostic box deltas) are normalized and coupled.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::context::{pool_with_context, pool_with_context_backward_into, ContextPair, CONTEXT_FACTOR};
use crate::coupling::{
    couple, couple_backward, normalize_branch, normalize_branch_backward, AffineScale, CouplingConfig,
    Normalization, ScaleParams,
};
use crate::error::{Error, Result};
use crate::nn::{conv2d, conv2d_backward, relu, relu_backward, ConvParams};
use crate::rng;
use crate::roi::{
    psroi_pool_avg, psroi_pool_avg_backward_into, roi_pool_max, roi_pool_max_backward_into, vote_average,
    vote_average_backward, MaxPoolIndices, PooledLocal, RoI,
};
use crate::tensor::{Shape, Tensor};

/// Total stride of the backbone.
pub const BACKBONE_STRIDE: usize = 4;
pub const SPATIAL_SCALE: f64 = 1.0 / BACKBONE_STRIDE as f64;

/// Architecture hyper-parameters; echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Part grid resolution.
    pub k: usize,
    /// Foreground classes `C`.
    pub num_classes: usize,
    /// Channels of the global reduction conv (`D`).
    pub reduce_dim: usize,
    /// Output channels of the global `k x k` conv.
    pub hidden_dim: usize,
    pub backbone_channels: [usize; 3],
    pub context: bool,
    pub context_factor: f64,
    pub coupling: CouplingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 3,
            num_classes: 4,
            reduce_dim: 64,
            hidden_dim: 64,
            backbone_channels: [8, 16, 32],
            context: false,
            context_factor: CONTEXT_FACTOR,
            coupling: CouplingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn classes_plus_bg(&self) -> usize {
        self.num_classes + 1
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_channels[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.num_classes == 0 {
            return Err(Error::Config("k and num_classes must be >= 1".into()));
        }
        if self.reduce_dim == 0 || self.hidden_dim == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        if !(self.context_factor >= 1.0) {
            return Err(Error::Config(format!("context_factor must be >= 1, got {}", self.context_factor)));
        }
        self.coupling.validate()
    }
}

/// Three 3x3 convolutions with strides 2, 2, 1, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub conv3: ConvParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// 1x1 conv to `k^2 (C+1)` position-sensitive score maps.
    pub local_score_conv: ConvParams,
    /// 1x1 conv to `4 k^2` position-sensitive box maps.
    pub local_bbox_conv: ConvParams,
    /// 1x1 conv to `D` channels.
    pub global_reduce_conv: ConvParams,
    /// `k x k` valid conv collapsing the pooled grid to 1x1.
    pub global_kxk_conv: ConvParams,
    pub global_cls_conv: ConvParams,
    pub global_bbox_conv: ConvParams,
    pub scale_params: ScaleParams,
}

/// Backbone plus head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub head: HeadParams,
}

/// Shape and storage of one named parameter.
pub struct ParamEntry<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: &'a [f64],
}

pub struct ParamEntryMut<'a> {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: &'a mut [f64],
}

impl Model {
    /// Seeded initialization: uniform weights with bound `1/sqrt(fan_in)`, zero biases,
    /// identity learned scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, "model-init", 0);
        let [c1, c2, c3] = config.backbone_channels;
        let k = config.k;
        let cls = config.classes_plus_bg();
        let global_in = config.reduce_dim * if config.context { 2 } else { 1 };
        let backbone = Backbone {
            conv1: ConvParams::uniform_init(&mut r, c1, 1, 3, 3, 2, 1),
            conv2: ConvParams::uniform_init(&mut r, c2, c1, 3, 3, 2, 1),
            conv3: ConvParams::uniform_init(&mut r, c3, c2, 3, 3, 1, 1),
        };
        let head = HeadParams {
            local_score_conv: ConvParams::uniform_init(&mut r, k * k * cls, c3, 1, 1, 1, 0),
            local_bbox_conv: ConvParams::uniform_init(&mut r, 4 * k * k, c3, 1, 1, 1, 0),
            global_reduce_conv: ConvParams::uniform_init(&mut r, config.reduce_dim, c3, 1, 1, 1, 0),
            global_kxk_conv: ConvParams::uniform_init(&mut r, config.hidden_dim, global_in, k, k, 1, 0),
            global_cls_conv: ConvParams::uniform_init(&mut r, cls, config.hidden_dim, 1, 1, 1, 0),
            global_bbox_conv: ConvParams::uniform_init(&mut r, 4, config.hidden_dim, 1, 1, 1, 0),
            scale_params: ScaleParams::identity(cls),
        };
        Ok(Model {
            config,
            backbone,
            head,
        })
    }

    /// Same architecture with every parameter zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Model {
        let mut m = self.clone();
        for p in m.params_mut() {
            p.values.fill(0.0);
        }
        m
    }

    fn convs(&self) -> [(&'static str, &ConvParams); 9] {
        let b = &self.backbone;
        let h = &self.head;
        [
            ("backbone.conv1", &b.conv1),
            ("backbone.conv2", &b.conv2),
            ("backbone.conv3", &b.conv3),
            ("local.score_conv", &h.local_score_conv),
            ("local.bbox_conv", &h.local_bbox_conv),
            ("global.reduce_conv", &h.global_reduce_conv),
            ("global.kxk_conv", &h.global_kxk_conv),
            ("global.cls_conv", &h.global_cls_conv),
            ("global.bbox_conv", &h.global_bbox_conv),
        ]
    }

    fn scales(&self) -> [(&'static str, &AffineScale); 4] {
        let s = &self.head.scale_params;
        [
            ("scale.local_cls", &s.local_cls),
            ("scale.global_cls", &s.global_cls),
            ("scale.local_bbox", &s.local_bbox),
            ("scale.global_bbox", &s.global_bbox),
        ]
    }

    /// Every parameter in a fixed order with a stable name.
    pub fn params(&self) -> Vec<ParamEntry<'_>> {
        let mut out = Vec::new();
        for (name, c) in self.convs() {
            out.push(ParamEntry {
                name: format!("{name}.weight"),
                dims: c.weight.shape().dims().to_vec(),
                values: c.weight.data(),
            });
            out.push(ParamEntry {
                name: format!("{name}.bias"),
                dims: vec![c.bias.len()],
                values: &c.bias,
            });
        }
        for (name, s) in self.scales() {
            out.push(ParamEntry {
                name: format!("{name}.scale"),
                dims: vec![s.scale.len()],
                values: &s.scale,
            });
            out.push(ParamEntry {
                name: format!("{name}.bias"),
                dims: vec![s.bias.len()],
                values: &s.bias,
            });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamEntryMut<'_>> {
        let mut out = Vec::new();
        let (convs, scales) = {
            let Model { backbone, head, .. } = self;
            let HeadParams {
                local_score_conv,
                local_bbox_conv,
                global_reduce_conv,
                global_kxk_conv,
                global_cls_conv,
                global_bbox_conv,
                scale_params,
            } = head;
            let convs: [(&'static str, &mut ConvParams); 9] = [
                ("backbone.conv1", &mut backbone.conv1),
                ("backbone.conv2", &mut backbone.conv2),
                ("backbone.conv3", &mut backbone.conv3),
                ("local.score_conv", local_score_conv),
                ("local.bbox_conv", local_bbox_conv),
                ("global.reduce_conv", global_reduce_conv),
                ("global.kxk_conv", global_kxk_conv),
                ("global.cls_conv", global_cls_conv),
                ("global.bbox_conv", global_bbox_conv),
            ];
            let scales: [(&'static str, &mut AffineScale); 4] = [
                ("scale.local_cls", &mut scale_params.local_cls),
                ("scale.global_cls", &mut scale_params.global_cls),
                ("scale.local_bbox", &mut scale_params.local_bbox),
                ("scale.global_bbox", &mut scale_params.global_bbox),
            ];
            (convs, scales)
        };
        for (name, c) in convs {
            let dims = c.weight.shape().dims().to_vec();
            out.push(ParamEntryMut {
                name: format!("{name}.weight"),
                dims,
                values: c.weight.data_mut(),
            });
            out.push(ParamEntryMut {
                name: format!("{name}.bias"),
                dims: vec![c.bias.len()],
                values: &mut c.bias,
            });
        }
        for (name, s) in scales {
            out.push(ParamEntryMut {
                name: format!("{name}.scale"),
                dims: vec![s.scale.len()],
                values: &mut s.scale,
            });
            out.push(ParamEntryMut {
                name: format!("{name}.bias"),
                dims: vec![s.bias.len()],
                values: &mut s.bias,
            });
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.values.len()).sum()
    }

    /// `self += alpha * other`, parameter by parameter.
    pub fn axpy(&mut self, alpha: f64, other: &Model) {
        let src = other.params();
        for (dst, s) in self.params_mut().into_iter().zip(src) {
            for (d, v) in dst.values.iter_mut().zip(s.values) {
                *d += alpha * v;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.values.iter().all(|v| v.is_finite()))
    }

    pub fn backbone_forward(&self, image: &Tensor) -> Result<(Tensor, BackboneCache)> {
        if image.shape().c != 1 {
            return Err(Error::InvalidArgument(format!(
                "backbone expects single-channel images, got {}",
                image.shape()
            )));
        }
        let pre1 = conv2d(image, &self.backbone.conv1)?;
        let post1 = relu(&pre1);
        let pre2 = conv2d(&post1, &self.backbone.conv2)?;
        let post2 = relu(&pre2);
        let pre3 = conv2d(&post2, &self.backbone.conv3)?;
        let features = relu(&pre3);
        Ok((
            features.clone(),
            BackboneCache {
                image: image.clone(),
                pre: [pre1, pre2, pre3],
                post: [post1, post2, features],
            },
        ))
    }

    fn backbone_backward(&self, cache: &BackboneCache, grad_features: &Tensor, grads: &mut Model) -> Result<()> {
        let b = &self.backbone;
        let g3 = relu_backward(&cache.pre[2], grad_features)?;
        let c3 = conv2d_backward(&cache.post[1], &b.conv3, &g3)?;
        let g2 = relu_backward(&cache.pre[1], &c3.input)?;
        let c2 = conv2d_backward(&cache.post[0], &b.conv2, &g2)?;
        let g1 = relu_backward(&cache.pre[0], &c2.input)?;
        let c1 = conv2d_backward(&cache.image, &b.conv1, &g1)?;
        accumulate_conv(&mut grads.backbone.conv3, &c3.weight, &c3.bias);
        accumulate_conv(&mut grads.backbone.conv2, &c2.weight, &c2.bias);
        accumulate_conv(&mut grads.backbone.conv1, &c1.weight, &c1.bias);
        Ok(())
    }

    /// Full forward pass for one `1 x 1 x H x W` image, keeping what backward needs.
    pub fn forward(&self, image: &Tensor, rois: &[RoI]) -> Result<ForwardPass> {
        let (features, backbone) = self.backbone_forward(image)?;
        let s = image.shape();
        let head = self.head.forward(&self.config, &features, rois, s.w as f64, s.h as f64)?;
        Ok(ForwardPass { backbone, head })
    }

    /// Forward pass without retaining caches.
    pub fn predict(&self, image: &Tensor, rois: &[RoI]) -> Result<Vec<RoIOutput>> {
        Ok(self.forward(image, rois)?.head.outputs)
    }

    /// Gradients of a loss whose cotangents w.r.t. each RoI output are `grads`;
    /// `None` entries contribute nothing.
    pub fn backward(&self, pass: &ForwardPass, grads: &[Option<OutputGrad>]) -> Result<Model> {
        let mut acc = self.zeros_like();
        let grad_features = self.head.backward(&self.config, &pass.head, grads, &mut acc.head)?;
        self.backbone_backward(&pass.backbone, &grad_features, &mut acc)?;
        Ok(acc)
    }
}

fn accumulate_conv(dst: &mut ConvParams, weight: &Tensor, bias: &[f64]) {
    for (d, v) in dst.weight.data_mut().iter_mut().zip(weight.data()) {
        *d += v;
    }
    for (d, v) in dst.bias.iter_mut().zip(bias) {
        *d += v;
    }
}

fn accumulate_affine(dst: &mut AffineScale, src: &AffineScale) {
    for (d, v) in dst.scale.iter_mut().zip(&src.scale) {
        *d += v;
    }
    for (d, v) in dst.bias.iter_mut().zip(&src.bias) {
        *d += v;
    }
}

pub struct BackboneCache {
    image: Tensor,
    pre: [Tensor; 3],
    post: [Tensor; 3],
}

/// Pre-coupling branch outputs kept for diagnostics.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct BranchScores {
    pub local_cls: Option<Vec<f64>>,
    pub local_bbox: Option<Vec<f64>>,
    pub global_cls: Option<Vec<f64>>,
    pub global_bbox: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoIOutput {
    /// Coupled logits over background plus `C` classes.
    pub cls_scores: Vec<f64>,
    /// Class-agnostic `(dx, dy, dw, dh)`.
    pub bbox_deltas: [f64; 4],
    pub branch_scores: BranchScores,
}

/// Cotangent of the loss with respect to one [`RoIOutput`].
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub cls: Vec<f64>,
    pub bbox: [f64; 4],
}

enum PoolRecord {
    Plain(MaxPoolIndices),
    Context([MaxPoolIndices; 2]),
}

struct LocalCache {
    score_shape: Shape,
    bbox_shape: Shape,
    score: Vec<PooledLocal>,
    bbox: Vec<PooledLocal>,
}

struct GlobalCache {
    reduced_shape: Shape,
    pools: Vec<PoolRecord>,
    /// (N, D or 2D, k, k)
    pooled: Tensor,
    hidden_pre: Tensor,
    hidden: Tensor,
}

pub struct HeadCache {
    features: Tensor,
    local: Option<LocalCache>,
    global: Option<GlobalCache>,
    pub outputs: Vec<RoIOutput>,
}

pub struct ForwardPass {
    backbone: BackboneCache,
    pub head: HeadCache,
}

impl ForwardPass {
    pub fn outputs(&self) -> &[RoIOutput] {
        &self.head.outputs
    }

    /// Hash of every discrete choice made by the forward pass (ReLU masks, max-pool
    /// winners, max-coupling winners). Two passes with equal signatures lie in the same
    /// piecewise-smooth region.
    pub fn pattern_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for t in self.backbone.pre.iter() {
            for v in t.data() {
                (*v > 0.0).hash(&mut h);
            }
        }
        if let Some(g) = &self.head.global {
            for v in g.hidden_pre.data() {
                (*v > 0.0).hash(&mut h);
            }
            for p in &g.pools {
                match p {
                    PoolRecord::Plain(i) => i.argmax.hash(&mut h),
                    PoolRecord::Context([a, b]) => {
                        a.argmax.hash(&mut h);
                        b.argmax.hash(&mut h);
                    }
                }
            }
        }
        for o in &self.head.outputs {
            let b = &o.branch_scores;
            if let (Some(l), Some(g)) = (&b.local_cls, &b.global_cls) {
                for (x, y) in l.iter().zip(g) {
                    (x >= y).hash(&mut h);
                }
            }
            if let (Some(l), Some(g)) = (&b.local_bbox, &b.global_bbox) {
                for (x, y) in l.iter().zip(g) {
                    (x >= y).hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

fn column(t: &Tensor, n: usize) -> Vec<f64> {
    let s = t.shape();
    let chunk = s.c * s.plane();
    t.data()[n * chunk..(n + 1) * chunk].to_vec()
}

fn gather_batch(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let items: Vec<Tensor> = rows.iter().map(|&i| t.batch_item(i)).collect();
    Tensor::stack_batch(&items)
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let c = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(Shape::new(rows.len(), c, 1, 1), rows.concat())
}

impl HeadParams {
    fn pool_global(&self, cfg: &ModelConfig, reduced: &Tensor, roi: &RoI, image_w: f64, image_h: f64) -> Result<(Tensor, PoolRecord)> {
        if cfg.context {
            let pair = ContextPair::new(*roi, cfg.context_factor, image_w, image_h)?;
            let (t, idx) = pool_with_context(reduced, &pair, cfg.k, SPATIAL_SCALE)?;
            Ok((t, PoolRecord::Context(idx)))
        } else {
            let (t, idx) = roi_pool_max(reduced, roi, cfg.k, cfg.k, SPATIAL_SCALE)?;
            Ok((t, PoolRecord::Plain(idx)))
        }
    }

    /// Runs the enabled branches for every RoI and couples them.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        features: &Tensor,
        rois: &[RoI],
        image_w: f64,
        image_h: f64,
    ) -> Result<HeadCache> {
        let coupling = cfg.coupling;
        coupling.validate()?;
        let cls_n = cfg.classes_plus_bg();
        let k = cfg.k;

        let local = if coupling.enable_local {
            let score_maps = conv2d(features, &self.local_score_conv)?;
            let bbox_maps = conv2d(features, &self.local_bbox_conv)?;
            let mut score = Vec::with_capacity(rois.len());
            let mut bbox = Vec::with_capacity(rois.len());
            for roi in rois {
                score.push(psroi_pool_avg(&score_maps, roi, k, cls_n, SPATIAL_SCALE)?);
                bbox.push(psroi_pool_avg(&bbox_maps, roi, k, 4, SPATIAL_SCALE)?);
            }
            Some(LocalCache {
                score_shape: score_maps.shape(),
                bbox_shape: bbox_maps.shape(),
                score,
                bbox,
            })
        } else {
            None
        };

        let global = if coupling.enable_global && !rois.is_empty() {
            let reduced = conv2d(features, &self.global_reduce_conv)?;
            let mut pooled = Vec::with_capacity(rois.len());
            let mut pools = Vec::with_capacity(rois.len());
            for roi in rois {
                let (t, rec) = self.pool_global(cfg, &reduced, roi, image_w, image_h)?;
                pooled.push(t);
                pools.push(rec);
            }
            let pooled = Tensor::stack_batch(&pooled)?;
            let hidden_pre = conv2d(&pooled, &self.global_kxk_conv)?;
            let hidden = relu(&hidden_pre);
            Some(GlobalCache {
                reduced_shape: reduced.shape(),
                pools,
                pooled,
                hidden_pre,
                hidden,
            })
        } else {
            None
        };

        let (global_cls, global_bbox) = match &global {
            Some(g) => (
                Some(conv2d(&g.hidden, &self.global_cls_conv)?),
                Some(conv2d(&g.hidden, &self.global_bbox_conv)?),
            ),
            None => (None, None),
        };

        let sp = &self.scale_params;
        let norm = coupling.normalization;
        let mut outputs = Vec::with_capacity(rois.len());
        for i in 0..rois.len() {
            let branch = BranchScores {
                local_cls: local.as_ref().map(|l| vote_average(&l.score[i])),
                local_bbox: local.as_ref().map(|l| vote_average(&l.bbox[i])),
                global_cls: global_cls.as_ref().map(|t| column(t, i)),
                global_bbox: global_bbox.as_ref().map(|t| column(t, i)),
            };
            let cls = combine(
                branch.local_cls.as_deref(),
                branch.global_cls.as_deref(),
                norm,
                &sp.local_cls,
                &sp.global_cls,
                coupling,
            )?;
            let bbox = combine(
                branch.local_bbox.as_deref(),
                branch.global_bbox.as_deref(),
                norm,
                &sp.local_bbox,
                &sp.global_bbox,
                coupling,
            )?;
            let out = RoIOutput {
                cls_scores: cls,
                bbox_deltas: [bbox[0], bbox[1], bbox[2], bbox[3]],
                branch_scores: branch,
            };
            if !out.cls_scores.iter().chain(&out.bbox_deltas).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("head output for RoI {i}")));
            }
            outputs.push(out);
        }

        Ok(HeadCache {
            features: features.clone(),
            local,
            global,
            outputs,
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient w.r.t.
    /// the backbone features.
    pub fn backward(
        &self,
        cfg: &ModelConfig,
        cache: &HeadCache,
        out_grads: &[Option<OutputGrad>],
        grads: &mut HeadParams,
    ) -> Result<Tensor> {
        if out_grads.len() != cache.outputs.len() {
            return Err(crate::error::shape_err(
                "HeadParams::backward",
                format!("{} cotangents for {} RoIs", out_grads.len(), cache.outputs.len()),
            ));
        }
        let coupling = cfg.coupling;
        let norm = coupling.normalization;
        let sp = &self.scale_params;
        let mut grad_features = Tensor::zeros(cache.features.shape());

        let mut grad_score = cache.local.as_ref().map(|l| Tensor::zeros(l.score_shape));
        let mut grad_bbox = cache.local.as_ref().map(|l| Tensor::zeros(l.bbox_shape));
        let mut global_rows = Vec::new();
        let mut global_cls_rows = Vec::new();
        let mut global_bbox_rows = Vec::new();

        for (i, g) in out_grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if g.cls.len() != cfg.classes_plus_bg() {
                return Err(crate::error::shape_err(
                    "HeadParams::backward",
                    format!("class cotangent of length {}", g.cls.len()),
                ));
            }
            let b = &cache.outputs[i].branch_scores;
            let (dl_cls, dg_cls) = uncombine(
                b.local_cls.as_deref(),
                b.global_cls.as_deref(),
                norm,
                (&sp.local_cls, &sp.global_cls),
                (&mut grads.scale_params.local_cls, &mut grads.scale_params.global_cls),
                coupling,
                &g.cls,
            )?;
            let (dl_box, dg_box) = uncombine(
                b.local_bbox.as_deref(),
                b.global_bbox.as_deref(),
                norm,
                (&sp.local_bbox, &sp.global_bbox),
                (&mut grads.scale_params.local_bbox, &mut grads.scale_params.global_bbox),
                coupling,
                &g.bbox,
            )?;
            if let (Some(local), Some(gs), Some(gb)) = (&cache.local, grad_score.as_mut(), grad_bbox.as_mut()) {
                let up = vote_average_backward(cfg.k, &dl_cls.unwrap_or_default());
                psroi_pool_avg_backward_into(&local.score[i], &up, gs)?;
                let up = vote_average_backward(cfg.k, &dl_box.unwrap_or_default());
                psroi_pool_avg_backward_into(&local.bbox[i], &up, gb)?;
            }
            if cache.global.is_some() {
                global_rows.push(i);
                global_cls_rows.push(dg_cls.unwrap_or_default());
                global_bbox_rows.push(dg_box.unwrap_or_default());
            }
        }

        if let (Some(gs), Some(gb)) = (grad_score, grad_bbox) {
            let c = conv2d_backward(&cache.features, &self.local_score_conv, &gs)?;
            accumulate_conv(&mut grads.local_score_conv, &c.weight, &c.bias);
            grad_features.add_assign(&c.input)?;
            let c = conv2d_backward(&cache.features, &self.local_bbox_conv, &gb)?;
            accumulate_conv(&mut grads.local_bbox_conv, &c.weight, &c.bias);
            grad_features.add_assign(&c.input)?;
        }

        if let (Some(global), false) = (&cache.global, global_rows.is_empty()) {
            let hidden = gather_batch(&global.hidden, &global_rows)?;
            let hidden_pre = gather_batch(&global.hidden_pre, &global_rows)?;
            let pooled = gather_batch(&global.pooled, &global_rows)?;
            let d_cls = rows_to_tensor(&global_cls_rows)?;
            let d_box = rows_to_tensor(&global_bbox_rows)?;
            let c_cls = conv2d_backward(&hidden, &self.global_cls_conv, &d_cls)?;
            let c_box = conv2d_backward(&hidden, &self.global_bbox_conv, &d_box)?;
            accumulate_conv(&mut grads.global_cls_conv, &c_cls.weight, &c_cls.bias);
            accumulate_conv(&mut grads.global_bbox_conv, &c_box.weight, &c_box.bias);
            let mut d_hidden = c_cls.input;
            d_hidden.add_assign(&c_box.input)?;
            let d_pre = relu_backward(&hidden_pre, &d_hidden)?;
            let c_kxk = conv2d_backward(&pooled, &self.global_kxk_conv, &d_pre)?;
            accumulate_conv(&mut grads.global_kxk_conv, &c_kxk.weight, &c_kxk.bias);
            let mut grad_reduced = Tensor::zeros(global.reduced_shape);
            for (row, &i) in global_rows.iter().enumerate() {
                let up = c_kxk.input.batch_item(row);
                match &global.pools[i] {
                    PoolRecord::Plain(idx) => roi_pool_max_backward_into(idx, &up, &mut grad_reduced)?,
                    PoolRecord::Context(idx) => pool_with_context_backward_into(idx, &up, &mut grad_reduced)?,
                }
            }
            let c = conv2d_backward(&cache.features, &self.global_reduce_conv, &grad_reduced)?;
            accumulate_conv(&mut grads.global_reduce_conv, &c.weight, &c.bias);
            grad_features.add_assign(&c.input)?;
        }
        Ok(grad_features)
    }
}

/// Normalizes and couples the enabled branch vectors; a lone branch bypasses coupling.
fn combine(
    local: Option<&[f64]>,
    global: Option<&[f64]>,
    norm: Normalization,
    local_scale: &AffineScale,
    global_scale: &AffineScale,
    coupling: CouplingConfig,
) -> Result<Vec<f64>> {
    match (local, global) {
        (Some(l), Some(g)) => {
            let nl = normalize_branch(l, norm, Some(local_scale))?;
            let ng = normalize_branch(g, norm, Some(global_scale))?;
            couple(&nl, &ng, coupling.strategy)
        }
        (Some(l), None) => normalize_branch(l, norm, Some(local_scale)),
        (None, Some(g)) => normalize_branch(g, norm, Some(global_scale)),
        (None, None) => Err(Error::Config("no branch enabled".into())),
    }
}

type BranchGrads = (Option<Vec<f64>>, Option<Vec<f64>>);

fn uncombine(
    local: Option<&[f64]>,
    global: Option<&[f64]>,
    norm: Normalization,
    scales: (&AffineScale, &AffineScale),
    scale_grads: (&mut AffineScale, &mut AffineScale),
    coupling: CouplingConfig,
    upstream: &[f64],
) -> Result<BranchGrads> {
    let back = |v: &[f64], scale: &AffineScale, acc: &mut AffineScale, g: &[f64]| -> Result<Vec<f64>> {
        let r = normalize_branch_backward(v, norm, Some(scale), g)?;
        if let Some(a) = r.affine {
            accumulate_affine(acc, &a);
        }
        Ok(r.input)
    };
    match (local, global) {
        (Some(l), Some(g)) => {
            let nl = normalize_branch(l, norm, Some(scales.0))?;
            let ng = normalize_branch(g, norm, Some(scales.1))?;
            let (gl, gg) = couple_backward(&nl, &ng, coupling.strategy, upstream)?;
            Ok((
                Some(back(l, scales.0, scale_grads.0, &gl)?),
                Some(back(g, scales.1, scale_grads.1, &gg)?),
            ))
        }
        (Some(l), None) => Ok((Some(back(l, scales.0, scale_grads.0, upstream)?), None)),
        (None, Some(g)) => Ok((None, Some(back(g, scales.1, scale_grads.1, upstream)?))),
        (None, None) => Err(Error::Config("no branch enabled".into())),
    }
}

/// Local branch for a single RoI: score maps, PSRoI pooling, voting.
pub fn local_branch(features: &Tensor, roi: &RoI, params: &HeadParams, k: usize, num_classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let score_maps = conv2d(features, &params.local_score_conv)?;
    let bbox_maps = conv2d(features, &params.local_bbox_conv)?;
    let cls = vote_average(&psroi_pool_avg(&score_maps, roi, k, num_classes + 1, SPATIAL_SCALE)?);
    let bbox = vote_average(&psroi_pool_avg(&bbox_maps, roi, k, 4, SPATIAL_SCALE)?);
    Ok((cls, bbox))
}

/// Global branch for a single RoI: reduction, (context) RoI pooling, `k x k` conv, ReLU,
/// classifier and box convolutions.
pub fn global_branch(
    features: &Tensor,
    roi: &RoI,
    params: &HeadParams,
    k: usize,
    use_context: bool,
    image_w: f64,
    image_h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let reduced = conv2d(features, &params.global_reduce_conv)?;
    let pooled = if use_context {
        let pair = ContextPair::new(*roi, CONTEXT_FACTOR, image_w, image_h)?;
        pool_with_context(&reduced, &pair, k, SPATIAL_SCALE)?.0
    } else {
        roi_pool_max(&reduced, roi, k, k, SPATIAL_SCALE)?.0
    };
    let hidden = relu(&conv2d(&pooled, &params.global_kxk_conv)?);
    let cls = conv2d(&hidden, &params.global_cls_conv)?.into_vec();
    let bbox = conv2d(&hidden, &params.global_bbox_conv)?.into_vec();
    Ok((cls, bbox))
}

/// Coupled head outputs for every RoI given backbone features.
pub fn couplenet_forward(
    features: &Tensor,
    rois: &[RoI],
    params: &HeadParams,
    config: &ModelConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<RoIOutput>> {
    Ok(params.forward(config, features, rois, image_w, image_h)?.outputs)
}
