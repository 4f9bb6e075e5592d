//! Multi-task loss, hard-example selection and the SGD training loop.

use log::{debug, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::heads::{Model, OutputGrad, RoIOutput};
use crate::nn::{smooth_l1, softmax_cross_entropy};
use crate::proposals::{assign_targets, generate_proposals, ProposalConfig, RoITarget};
use crate::rng;
use crate::synth::{rasterize, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { cls: 1.0, bbox: 1.0 }
    }
}

/// A run of `iterations` steps at a constant learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub iterations: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_schedule: Vec<LrPhase>,
    pub momentum: f64,
    /// RoIs per image that receive gradient (B).
    pub rois_per_image: usize,
    pub loss_weights: LossWeights,
    pub ohem: bool,
    /// Resize factors; one is drawn per iteration.
    pub scales: Vec<f64>,
    pub fg_thresh: f64,
    pub bg_range: (f64, f64),
    /// Loss is averaged and logged every this many iterations.
    pub log_every: usize,
    /// Validation mAP on the first `val_scenes` test scenes every this many
    /// iterations; 0 disables it.
    pub val_every: usize,
    pub val_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_schedule: vec![LrPhase { iterations: 2000, lr: 0.002 }, LrPhase { iterations: 500, lr: 0.0002 }],
            momentum: 0.9,
            rois_per_image: 32,
            loss_weights: LossWeights::default(),
            ohem: true,
            scales: vec![1.0],
            fg_thresh: crate::proposals::DEFAULT_FG_THRESH,
            bg_range: crate::proposals::DEFAULT_BG_RANGE,
            log_every: 50,
            val_every: 0,
            val_scenes: 50,
        }
    }
}

impl TrainConfig {
    pub fn iterations(&self) -> usize {
        self.lr_schedule.iter().map(|p| p.iterations).sum()
    }

    /// Learning rate at zero-based iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let mut end = 0;
        for p in &self.lr_schedule {
            end += p.iterations;
            if iter < end {
                return p.lr;
            }
        }
        self.lr_schedule.last().map_or(0.0, |p| p.lr)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rois_per_image == 0 {
            return Err(Error::Config("rois_per_image must be >= 1".into()));
        }
        if let Some(p) = self.lr_schedule.iter().find(|p| !(p.lr > 0.0 && p.lr.is_finite())) {
            return Err(Error::Config(format!("learning rates must be > 0, got {}", p.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("scales must be a non-empty list of positive factors".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        let w = self.loss_weights;
        if !(w.cls >= 0.0 && w.bbox >= 0.0 && w.cls.is_finite() && w.bbox.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Loss value, its parts, per-RoI contributions and cotangents for backward.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskLoss {
    pub total: f64,
    /// Mean cross-entropy over non-ignored RoIs (unweighted).
    pub cls: f64,
    /// Mean smooth-L1 over foreground RoIs (unweighted).
    pub bbox: f64,
    /// `w_cls * ce + w_bbox * smooth_l1` per RoI; `None` when ignored.
    pub per_roi: Vec<Option<f64>>,
    /// Gradient of `total` w.r.t. each RoI's outputs; `None` when ignored.
    pub grads: Vec<Option<OutputGrad>>,
}

pub fn multitask_loss(outputs: &[RoIOutput], targets: &[RoITarget], weights: LossWeights) -> Result<MultitaskLoss> {
    if outputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let n_cls = targets.iter().filter(|t| t.label().is_some()).count();
    let n_fg = targets.iter().filter(|t| t.regression_target().is_some()).count();
    if n_cls == 0 {
        warn!("multitask loss over {} RoIs with none assigned; loss is 0", targets.len());
    }
    let mut cls_sum = 0.0;
    let mut bbox_sum = 0.0;
    let mut per_roi = Vec::with_capacity(targets.len());
    let mut grads = Vec::with_capacity(targets.len());
    for (out, t) in outputs.iter().zip(targets) {
        let Some(label) = t.label() else {
            per_roi.push(None);
            grads.push(None);
            continue;
        };
        let (ce, mut g_cls) = softmax_cross_entropy(&out.cls_scores, label)?;
        cls_sum += ce;
        let scale = weights.cls / n_cls as f64;
        g_cls.iter_mut().for_each(|g| *g *= scale);
        let mut roi_loss = weights.cls * ce;
        let mut g_bbox = [0.0; 4];
        if let Some(target) = t.regression_target() {
            let (l, g) = smooth_l1(&out.bbox_deltas, target)?;
            bbox_sum += l;
            roi_loss += weights.bbox * l;
            let scale = weights.bbox / n_fg as f64;
            for (d, s) in g_bbox.iter_mut().zip(g) {
                *d = scale * s;
            }
        }
        per_roi.push(Some(roi_loss));
        grads.push(Some(OutputGrad { cls: g_cls, bbox: g_bbox }));
    }
    let cls = if n_cls > 0 { cls_sum / n_cls as f64 } else { 0.0 };
    let bbox = if n_fg > 0 { bbox_sum / n_fg as f64 } else { 0.0 };
    Ok(MultitaskLoss {
        total: weights.cls * cls + weights.bbox * bbox,
        cls,
        bbox,
        per_roi,
        grads,
    })
}

/// Indices of the `b` largest losses (ties favor the lower index), ascending.
pub fn ohem_select(losses: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&i, &j| losses[j].total_cmp(&losses[i]));
    order.truncate(b);
    order.sort_unstable();
    order
}

/// Momentum SGD on flat slices: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(crate::error::shape_err(
            "sgd_step",
            format!("{} params, {} grads, {} velocity", params.len(), grads.len(), velocity.len()),
        ));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// [`sgd_step`] applied to every parameter tensor of a model.
pub fn sgd_step_model(model: &mut Model, grads: &Model, lr: f64, momentum: f64, velocity: &mut Model) -> Result<()> {
    let g = grads.params();
    for ((p, g), v) in model.params_mut().into_iter().zip(g).zip(velocity.params_mut()) {
        sgd_step(p.values, g.values, lr, momentum, v.values)?;
    }
    Ok(())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Iterations completed.
    pub iter: usize,
    /// Averages since the previous record.
    pub loss: f64,
    pub cls_loss: f64,
    pub bbox_loss: f64,
    pub lr: f64,
    pub val_map: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricsRecord>,
}

/// Trains `model` in place on `dataset.train`. Everything random derives from `seed`.
/// `on_record` sees each metrics record as it is produced.
pub fn run_training(
    dataset: &Dataset,
    mut model: Model,
    cfg: &TrainConfig,
    proposals: &ProposalConfig,
    seed: u64,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    proposals.validate()?;
    let total_iters = cfg.iterations();
    if total_iters > 0 && dataset.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut velocity = model.zeros_like();
    let mut sampler = rng::stream(seed, "train-sampler", 0);
    let mut log = Vec::new();
    let mut window = (0.0, 0.0, 0.0, 0usize);
    let val_cfg = EvalConfig::default();
    for iter in 0..total_iters {
        let idx = sampler.random_range(0..dataset.train.len());
        let scale = cfg.scales[sampler.random_range(0..cfg.scales.len())];
        let scene = dataset.train[idx].scaled(scale);
        let image = rasterize(&scene, &dataset.config.render)?;
        let rois = generate_proposals(&scene, proposals, rng::derive_seed(seed, "train-proposals", iter as u64))?;
        let targets = assign_targets(&rois, &scene.ground_truth(), cfg.fg_thresh, cfg.bg_range)?;

        let pass = model.forward(&image, &rois)?;
        let full = multitask_loss(pass.outputs(), &targets, cfg.loss_weights)?;
        let candidates: Vec<usize> = (0..rois.len()).filter(|&i| full.per_roi[i].is_some()).collect();
        let chosen: Vec<usize> = if cfg.ohem {
            let losses: Vec<f64> = candidates.iter().map(|&i| full.per_roi[i].unwrap_or(0.0)).collect();
            ohem_select(&losses, cfg.rois_per_image).into_iter().map(|j| candidates[j]).collect()
        } else if candidates.len() <= cfg.rois_per_image {
            candidates
        } else {
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut sampler, candidates.len(), cfg.rois_per_image)
                .into_iter()
                .map(|j| candidates[j])
                .collect();
            picked.sort_unstable();
            picked
        };
        let mut selected = vec![RoITarget::Ignored; targets.len()];
        for &i in &chosen {
            selected[i] = targets[i].clone();
        }
        let loss = multitask_loss(pass.outputs(), &selected, cfg.loss_weights)?;
        if !loss.total.is_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                detail: format!("loss became {}", loss.total),
            });
        }
        let grads = model.backward(&pass, &loss.grads)?;
        let lr = cfg.lr_at(iter);
        sgd_step_model(&mut model, &grads, lr, cfg.momentum, &mut velocity)?;
        if !model.all_finite() {
            return Err(Error::Diverged {
                iteration: iter,
                detail: "parameters became non-finite".into(),
            });
        }

        window.0 += loss.total;
        window.1 += loss.cls;
        window.2 += loss.bbox;
        window.3 += 1;
        let done = iter + 1;
        if done % cfg.log_every == 0 || done == total_iters {
            let n = window.3 as f64;
            let val_map = if cfg.val_every > 0 && (done % cfg.val_every == 0 || done == total_iters) {
                let scenes = &dataset.test[..cfg.val_scenes.min(dataset.test.len())];
                let (report, _) = evaluate(&model, scenes, &dataset.config.render, proposals, seed, &val_cfg)?;
                Some(report.map)
            } else {
                None
            };
            let record = MetricsRecord {
                iter: done,
                loss: window.0 / n,
                cls_loss: window.1 / n,
                bbox_loss: window.2 / n,
                lr,
                val_map,
            };
            debug!("iter {done}: loss {:.4}", record.loss);
            on_record(&record);
            log.push(record);
            window = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome { model, log })
}
