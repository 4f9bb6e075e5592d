//! Axis-aligned boxes, overlap and the center/size regression parameterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roi::RoI;

/// Largest log-scale delta accepted by [`decode_boxes`]; keeps `exp` finite.
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Corner-form box in continuous image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn clip(&self, image_w: f64, image_h: f64) -> BBox {
        BBox {
            x1: self.x1.clamp(0.0, image_w),
            y1: self.y1.clamp(0.0, image_h),
            x2: self.x2.clamp(0.0, image_w),
            y2: self.y2.clamp(0.0, image_h),
        }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x1 * s, self.y1 * s, self.x2 * s, self.y2 * s)
    }

    pub fn to_roi(self, batch_index: usize) -> RoI {
        RoI {
            batch_index,
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }
}

impl From<&RoI> for BBox {
    fn from(r: &RoI) -> Self {
        BBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn compute_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target `(dx, dy, dw, dh)` taking `roi` onto `gt`.
pub fn encode_targets(roi: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (rw, rh) = (roi.width(), roi.height());
    let (gw, gh) = (gt.width(), gt.height());
    if rw <= 0.0 || rh <= 0.0 {
        return Err(Error::InvalidArgument(format!("RoI with non-positive extent: {roi:?}")));
    }
    if gw <= 0.0 || gh <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "ground truth with non-positive extent: {gt:?}"
        )));
    }
    let (rx, ry) = roi.center();
    let (gx, gy) = gt.center();
    Ok([(gx - rx) / rw, (gy - ry) / rh, (gw / rw).ln(), (gh / rh).ln()])
}

/// Applies `deltas` to `roi` (unclipped); exact inverse of [`encode_targets`].
pub fn apply_deltas(roi: &BBox, deltas: &[f64; 4]) -> BBox {
    let (rw, rh) = (roi.width(), roi.height());
    let (rx, ry) = roi.center();
    let cx = rx + deltas[0] * rw;
    let cy = ry + deltas[1] * rh;
    let w = rw * deltas[2].min(MAX_LOG_DELTA).exp();
    let h = rh * deltas[3].min(MAX_LOG_DELTA).exp();
    BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
}

/// Decodes `deltas` against `roi` and clips the result to the image.
pub fn decode_boxes(roi: &BBox, deltas: &[f64; 4], image_w: f64, image_h: f64) -> BBox {
    apply_deltas(roi, deltas).clip(image_w, image_h)
}
