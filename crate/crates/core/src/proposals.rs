//! Proposal generation standing in for a region proposal network, and training
//! target assignment.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{encode_targets, BBox};
use crate::error::{Error, Result};
use crate::rng;
use crate::roi::RoI;
use crate::synth::Scene;

pub use crate::boxes::compute_iou;

pub const DEFAULT_FG_THRESH: f64 = 0.5;
pub const DEFAULT_BG_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    /// Corner noise standard deviation relative to the box extent.
    pub jitter_scale: f64,
    pub positives_per_gt: usize,
    pub negatives_per_image: usize,
    /// Proposals per image at test time (jittered positives first, random boxes after).
    pub test_proposals: usize,
    /// Minimum side of any proposal, pixels.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            jitter_scale: 0.15,
            positives_per_gt: 8,
            negatives_per_image: 32,
            test_proposals: 64,
            min_size: 4.0,
        }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_scale >= 0.0 && self.jitter_scale.is_finite()) {
            return Err(Error::Config(format!("jitter_scale must be >= 0, got {}", self.jitter_scale)));
        }
        if !(self.min_size >= 1.0) {
            return Err(Error::Config("proposal min_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Grows `b` symmetrically until each side is at least `min_size`, then clips.
fn enforce_min_extent(b: BBox, min_size: f64, w: f64, h: f64) -> BBox {
    let fix = |lo: f64, hi: f64, limit: f64| -> (f64, f64) {
        let (lo, hi) = (lo.clamp(0.0, limit), hi.clamp(0.0, limit));
        let need = min_size.min(limit);
        if hi - lo >= need {
            return (lo, hi);
        }
        let c = 0.5 * (lo + hi);
        let lo = (c - 0.5 * need).clamp(0.0, limit - need);
        (lo, lo + need)
    };
    let (x1, x2) = fix(b.x1, b.x2, w);
    let (y1, y2) = fix(b.y1, b.y2, h);
    BBox::new(x1, y1, x2, y2)
}

fn jittered<R: Rng + ?Sized>(rng: &mut R, gt: &BBox, cfg: &ProposalConfig, w: f64, h: f64) -> BBox {
    if cfg.jitter_scale == 0.0 {
        return enforce_min_extent(*gt, cfg.min_size, w, h);
    }
    // jitter_scale > 0 checked by validate, extents > 0 by construction
    let nx = Normal::new(0.0, cfg.jitter_scale * gt.width().max(1e-6)).expect("finite sigma");
    let ny = Normal::new(0.0, cfg.jitter_scale * gt.height().max(1e-6)).expect("finite sigma");
    let mut x1 = gt.x1 + nx.sample(rng);
    let mut y1 = gt.y1 + ny.sample(rng);
    let mut x2 = gt.x2 + nx.sample(rng);
    let mut y2 = gt.y2 + ny.sample(rng);
    if x2 < x1 {
        std::mem::swap(&mut x1, &mut x2);
    }
    if y2 < y1 {
        std::mem::swap(&mut y1, &mut y2);
    }
    enforce_min_extent(BBox::new(x1, y1, x2, y2), cfg.min_size, w, h)
}

fn random_box<R: Rng + ?Sized>(rng: &mut R, cfg: &ProposalConfig, w: f64, h: f64) -> BBox {
    let min = cfg.min_size.max(8.0).min(w.min(h));
    let bw = if w > min { rng.random_range(min..=w) } else { w };
    let bh = if h > min { rng.random_range(min..=h) } else { h };
    let x = if w > bw { rng.random_range(0.0..w - bw) } else { 0.0 };
    let y = if h > bh { rng.random_range(0.0..h - bh) } else { 0.0 };
    BBox::new(x, y, x + bw, y + bh)
}

/// Training proposals: `positives_per_gt` jittered copies of every ground-truth box
/// followed by `negatives_per_image` uniformly random boxes.
pub fn generate_proposals(scene: &Scene, cfg: &ProposalConfig, seed: u64) -> Result<Vec<RoI>> {
    cfg.validate()?;
    let (w, h) = (scene.image_w as f64, scene.image_h as f64);
    let mut rng = rng::stream(seed, "proposals", 0);
    let gts = scene.ground_truth();
    let mut out = Vec::with_capacity(gts.len() * cfg.positives_per_gt + cfg.negatives_per_image);
    for (_, gt) in &gts {
        for _ in 0..cfg.positives_per_gt {
            out.push(jittered(&mut rng, gt, cfg, w, h).to_roi(0));
        }
    }
    for _ in 0..cfg.negatives_per_image {
        out.push(random_box(&mut rng, cfg, w, h).to_roi(0));
    }
    Ok(out)
}

/// Test-time proposals: jittered positives, then random boxes, `test_proposals` in total.
pub fn generate_test_proposals(scene: &Scene, cfg: &ProposalConfig, seed: u64) -> Result<Vec<RoI>> {
    cfg.validate()?;
    let (w, h) = (scene.image_w as f64, scene.image_h as f64);
    let mut rng = rng::stream(seed, "test-proposals", 0);
    let mut out = Vec::with_capacity(cfg.test_proposals);
    'outer: for (_, gt) in scene.ground_truth() {
        for _ in 0..cfg.positives_per_gt {
            if out.len() == cfg.test_proposals {
                break 'outer;
            }
            out.push(jittered(&mut rng, &gt, cfg, w, h).to_roi(0));
        }
    }
    while out.len() < cfg.test_proposals {
        out.push(random_box(&mut rng, cfg, w, h).to_roi(0));
    }
    Ok(out)
}

/// Dense sliding-window boxes for images without ground truth: square and 3:2
/// windows of several sizes at half-size stride, clipped to the image.
pub fn grid_proposals(image_w: usize, image_h: usize) -> Vec<RoI> {
    let (w, h) = (image_w as f64, image_h as f64);
    let mut out = Vec::new();
    for size in [12.0, 20.0, 32.0, 48.0] {
        for (bw, bh) in [(size, size), (1.5 * size, size)] {
            if bw > w || bh > h {
                continue;
            }
            let step = 0.5 * size;
            let mut y = 0.0;
            while y + bh <= h + 1e-9 {
                let mut x = 0.0;
                while x + bw <= w + 1e-9 {
                    out.push(RoI {
                        batch_index: 0,
                        x1: x,
                        y1: y,
                        x2: x + bw,
                        y2: y + bh,
                    });
                    x += step;
                }
                y += step;
            }
        }
    }
    out
}

/// Training target for one proposal.
#[derive(Clone, Debug, PartialEq)]
pub enum RoITarget {
    Foreground {
        label: usize,
        deltas: [f64; 4],
        matched_gt: usize,
    },
    Background {
        matched_gt: Option<usize>,
    },
    /// Excluded from every loss term.
    Ignored,
}

impl RoITarget {
    /// Class index, 0 for background, `None` when ignored.
    pub fn label(&self) -> Option<usize> {
        match self {
            RoITarget::Foreground { label, .. } => Some(*label),
            RoITarget::Background { .. } => Some(0),
            RoITarget::Ignored => None,
        }
    }

    pub fn regression_target(&self) -> Option<&[f64; 4]> {
        match self {
            RoITarget::Foreground { deltas, .. } => Some(deltas),
            _ => None,
        }
    }

    pub fn matched_gt(&self) -> Option<usize> {
        match self {
            RoITarget::Foreground { matched_gt, .. } => Some(*matched_gt),
            RoITarget::Background { matched_gt } => *matched_gt,
            RoITarget::Ignored => None,
        }
    }
}

/// Assigns each RoI by its best-overlapping ground truth (lowest index on ties):
/// IoU `>= fg_thresh` is foreground, `[lo, hi)` background, anything else ignored.
pub fn assign_targets(rois: &[RoI], gts: &[(usize, BBox)], fg_thresh: f64, bg_range: (f64, f64)) -> Result<Vec<RoITarget>> {
    let (lo, hi) = bg_range;
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    if !unit(fg_thresh) || !unit(lo) || !unit(hi) || lo >= hi || hi > fg_thresh {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 <= lo < hi <= fg <= 1, got fg={fg_thresh} bg=[{lo}, {hi})"
        )));
    }
    rois.iter()
        .map(|roi| {
            let rb = BBox::from(roi);
            let best = gts
                .iter()
                .enumerate()
                .map(|(i, (_, g))| (i, compute_iou(&rb, g)))
                .fold(None, |best: Option<(usize, f64)>, (i, iou)| match best {
                    Some((_, b)) if b >= iou => best,
                    _ => Some((i, iou)),
                });
            let (idx, iou) = match best {
                Some(b) => (Some(b.0), b.1),
                None => (None, 0.0),
            };
            Ok(match idx {
                Some(i) if iou >= fg_thresh => RoITarget::Foreground {
                    label: gts[i].0,
                    deltas: encode_targets(&rb, &gts[i].1)?,
                    matched_gt: i,
                },
                _ if iou >= lo && iou < hi => RoITarget::Background { matched_gt: idx },
                _ => RoITarget::Ignored,
            })
        })
        .collect()
}
