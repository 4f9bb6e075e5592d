//! Detection scoring, non-maximum suppression and average precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{compute_iou, decode_boxes, BBox};
use crate::error::{Error, Result};
use crate::heads::{Model, RoIOutput};
use crate::nn::softmax;
use crate::proposals::{generate_test_proposals, ProposalConfig};
use crate::rng;
use crate::roi::RoI;
use crate::synth::{rasterize, RenderConfig, Scene};

/// One scored box for a foreground class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the image within the evaluated split.
    pub image: usize,
    /// Class label, 1-based (0 is background and never detected).
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Ground-truth box of an evaluated split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMethod {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub nms_thresh: f64,
    /// Detections scoring below this are dropped before NMS.
    pub score_thresh: f64,
    pub max_per_image: usize,
    pub ap_method: ApMethod,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            nms_thresh: 0.3,
            score_thresh: 1e-3,
            max_per_image: 100,
            ap_method: ApMethod::AllPoints,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_thresh > 0.0 && self.nms_thresh < 1.0) {
            return Err(Error::Config(format!("nms_thresh must be in (0, 1), got {}", self.nms_thresh)));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(Error::Config(format!("iou_thresh must be in (0, 1], got {}", self.iou_thresh)));
        }
        if !self.score_thresh.is_finite() {
            return Err(Error::Config("score_thresh must be finite".into()));
        }
        Ok(())
    }
}

/// Indices sorted by descending score; ties keep the lower index first.
fn order_by_score(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy suppression, each (image, class) group independently. Returns kept
/// indices into `dets` in keep order within a group, groups ascending.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Result<Vec<usize>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::InvalidArgument(format!("NMS threshold must be in (0, 1), got {iou_thresh}")));
    }
    let mut groups: Vec<(usize, usize)> = dets.iter().map(|d| (d.image, d.class)).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut kept = Vec::new();
    for g in groups {
        let idx: Vec<usize> = (0..dets.len()).filter(|&i| (dets[i].image, dets[i].class) == g).collect();
        kept.extend(nms_single(dets, &idx, iou_thresh));
    }
    Ok(kept)
}

fn nms_single(dets: &[Detection], idx: &[usize], iou_thresh: f64) -> Vec<usize> {
    let order: Vec<usize> = order_by_score(idx.iter().map(|&i| dets[i].score))
        .into_iter()
        .map(|o| idx[o])
        .collect();
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for a in 0..order.len() {
        if suppressed[a] {
            continue;
        }
        kept.push(order[a]);
        let ba = dets[order[a]].bbox;
        for b in a + 1..order.len() {
            if !suppressed[b] && compute_iou(&ba, &dets[order[b]].bbox) > iou_thresh {
                suppressed[b] = true;
            }
        }
    }
    kept
}

/// Matches detections (any order; sorted internally, stable) to ground truth
/// and returns per-detection hit flags in score order.
fn match_detections(dets: &[&Detection], gts: &[&GroundTruth], iou_thresh: f64) -> Vec<bool> {
    let order = order_by_score(dets.iter().map(|d| d.score));
    let mut used = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let d = dets[i];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.image != d.image {
                    continue;
                }
                let iou = compute_iou(&d.bbox, &gt.bbox);
                if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Precision/recall points after each detection in score order.
pub fn precision_recall(hits: &[bool], num_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            (tp as f64 / (i + 1) as f64, tp as f64 / num_gt as f64)
        })
        .collect()
}

fn ap_from_curve(curve: &[(f64, f64)], method: ApMethod) -> f64 {
    // envelope[i] = max precision at or after point i
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match method {
        ApMethod::AllPoints => {
            let mut prev_recall = 0.0;
            let mut ap = 0.0;
            for (i, &(_, r)) in curve.iter().enumerate() {
                ap += (r - prev_recall) * envelope[i];
                prev_recall = r;
            }
            ap
        }
        ApMethod::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve
                        .iter()
                        .position(|&(_, r)| r >= t)
                        .map_or(0.0, |i| envelope[i])
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one class. Detections and ground truths of other classes are ignored.
/// Returns 0 when the class has no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class: usize,
    iou_thresh: f64,
    method: ApMethod,
) -> f64 {
    let d: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if g.is_empty() || d.is_empty() {
        return 0.0;
    }
    let hits = match_detections(&d, &g, iou_thresh);
    ap_from_curve(&precision_recall(&hits, g.len()), method)
}

/// Per-class AP for labels `1..=num_classes`; `None` for classes without ground truth.
pub fn per_class_ap(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_thresh: f64, method: ApMethod) -> Vec<Option<f64>> {
    (1..=num_classes)
        .map(|c| {
            gts.iter()
                .any(|g| g.class == c)
                .then(|| average_precision(dets, gts, c, iou_thresh, method))
        })
        .collect()
}

/// Mean over classes that have ground truth; 0 when none do.
pub fn mean_ap(per_class: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// IoU thresholds 0.5, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// mAP averaged over [`coco_thresholds`].
pub fn coco_map(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, method: ApMethod) -> f64 {
    let t = coco_thresholds();
    t.iter()
        .map(|&thr| mean_ap(&per_class_ap(dets, gts, num_classes, thr, method)))
        .sum::<f64>()
        / t.len() as f64
}

/// Turns head outputs into scored, decoded, suppressed detections for one image.
pub fn postprocess(
    outputs: &[RoIOutput],
    rois: &[RoI],
    image: usize,
    image_w: f64,
    image_h: f64,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    if outputs.len() != rois.len() {
        return Err(Error::InvalidArgument(format!("{} outputs for {} RoIs", outputs.len(), rois.len())));
    }
    let mut dets = Vec::new();
    for (out, roi) in outputs.iter().zip(rois) {
        let probs = softmax(&out.cls_scores);
        let bbox = decode_boxes(&BBox::from(roi), &out.bbox_deltas, image_w, image_h);
        if bbox.width() <= 0.0 || bbox.height() <= 0.0 {
            continue;
        }
        for (class, &score) in probs.iter().enumerate().skip(1) {
            if score >= cfg.score_thresh {
                dets.push(Detection { image, class, score, bbox });
            }
        }
    }
    let kept = nms(&dets, cfg.nms_thresh)?;
    let mut kept: Vec<Detection> = kept.into_iter().map(|i| dets[i]).collect();
    let order = order_by_score(kept.iter().map(|d| d.score));
    kept = order.into_iter().take(cfg.max_per_image).map(|i| kept[i]).collect();
    Ok(kept)
}

/// Runs the model on one scene with seeded test proposals.
pub fn detect_scene(
    model: &Model,
    scene: &Scene,
    image: usize,
    render: &RenderConfig,
    proposals: &ProposalConfig,
    proposal_seed: u64,
    cfg: &EvalConfig,
) -> Result<Vec<Detection>> {
    let img = rasterize(scene, render)?;
    let rois = generate_test_proposals(scene, proposals, proposal_seed)?;
    let outputs = model.predict(&img, &rois)?;
    postprocess(&outputs, &rois, image, scene.image_w as f64, scene.image_h as f64, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub iou_thresh: f64,
    pub map: f64,
    /// AP for labels 1..=C; `None` where the split has no instance of the class.
    pub per_class_ap: Vec<Option<f64>>,
    pub coco_map: f64,
}

/// Seed for the test proposals of scene `index`.
pub fn test_proposal_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, "eval-proposals", index as u64)
}

/// Detects on every scene (in parallel, results in scene order) and scores the split.
pub fn evaluate(
    model: &Model,
    scenes: &[Scene],
    render: &RenderConfig,
    proposals: &ProposalConfig,
    seed: u64,
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Detection>)> {
    cfg.validate()?;
    let per_image: Vec<Vec<Detection>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| detect_scene(model, s, i, render, proposals, test_proposal_seed(seed, i), cfg))
        .collect::<Result<_>>()?;
    let dets: Vec<Detection> = per_image.into_iter().flatten().collect();
    let gts = ground_truths(scenes);
    let c = model.config.num_classes;
    let per_class = per_class_ap(&dets, &gts, c, cfg.iou_thresh, cfg.ap_method);
    let report = EvalReport {
        num_images: scenes.len(),
        iou_thresh: cfg.iou_thresh,
        map: mean_ap(&per_class),
        per_class_ap: per_class,
        coco_map: coco_map(&dets, &gts, c, cfg.ap_method),
    };
    Ok((report, dets))
}

pub fn ground_truths(scenes: &[Scene]) -> Vec<GroundTruth> {
    scenes
        .iter()
        .enumerate()
        .flat_map(|(image, s)| {
            s.ground_truth()
                .into_iter()
                .map(move |(class, bbox)| GroundTruth { image, class, bbox })
        })
        .collect()
}
