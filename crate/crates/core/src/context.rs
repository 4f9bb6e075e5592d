//! Context regions for the global branch.

use crate::error::{Error, Result};
use crate::roi::{roi_pool_max, roi_pool_max_backward_into, MaxPoolIndices, RoI};
use crate::tensor::Tensor;

/// Default linear expansion of the context region.
pub const CONTEXT_FACTOR: f64 = 2.0;

/// A proposal and its enlarged context region (same image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContextPair {
    pub original: RoI,
    pub expanded: RoI,
}

impl ContextPair {
    pub fn new(roi: RoI, factor: f64, image_w: f64, image_h: f64) -> Result<Self> {
        Ok(ContextPair {
            original: roi,
            expanded: expand_roi(&roi, factor, image_w, image_h)?,
        })
    }

    /// A pair whose context region is the proposal itself.
    pub fn identity(roi: RoI) -> Self {
        ContextPair {
            original: roi,
            expanded: roi,
        }
    }
}

/// Scales width and height by `factor` about the center, then clips to the image.
pub fn expand_roi(roi: &RoI, factor: f64, image_w: f64, image_h: f64) -> Result<RoI> {
    if !(factor >= 1.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!("context factor must be >= 1, got {factor}")));
    }
    roi.validate()?;
    let cx = 0.5 * (roi.x1 + roi.x2);
    let cy = 0.5 * (roi.y1 + roi.y2);
    let hw = 0.5 * factor * roi.width();
    let hh = 0.5 * factor * roi.height();
    Ok(RoI {
        batch_index: roi.batch_index,
        x1: (cx - hw).clamp(0.0, image_w),
        y1: (cy - hh).clamp(0.0, image_h),
        x2: (cx + hw).clamp(0.0, image_w),
        y2: (cy + hh).clamp(0.0, image_h),
    })
}

/// Max-pools the original and the context region and concatenates them along
/// channels, original first.
pub fn pool_with_context(
    features: &Tensor,
    pair: &ContextPair,
    out_k: usize,
    spatial_scale: f64,
) -> Result<(Tensor, [MaxPoolIndices; 2])> {
    let (a, ia) = roi_pool_max(features, &pair.original, out_k, out_k, spatial_scale)?;
    let (b, ib) = roi_pool_max(features, &pair.expanded, out_k, out_k, spatial_scale)?;
    Ok((Tensor::concat_channels(&[&a, &b])?, [ia, ib]))
}

/// Routes the two halves of `upstream` back through their own pooling indices.
pub fn pool_with_context_backward_into(
    indices: &[MaxPoolIndices; 2],
    upstream: &Tensor,
    grad: &mut Tensor,
) -> Result<()> {
    let (a, b) = upstream.split_channels(indices[0].channels)?;
    roi_pool_max_backward_into(&indices[0], &a, grad)?;
    roi_pool_max_backward_into(&indices[1], &b, grad)
}
