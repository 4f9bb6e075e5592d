//! RoI max pooling (global branch) and position-sensitive RoI average pooling with
//! voting (local branch).
//!
//! Both operators share [`bin_ranges`]: RoI corners are scaled into feature-map
//! coordinates, quantized outward (`floor` for the top-left corner, `ceil` for the
//! bottom-right, minimum extent one cell), and bin `i` of `k` spans
//! `[floor(i * extent / k), ceil((i + 1) * extent / k))` from the quantized start,
//! clipped to the map. Bins that end up empty produce 0 and receive no gradient.
//!
//! Score-map channels for the position-sensitive pooling are laid out class-major,
//! then part row-major: class `c`, part `(i, j)` lives in channel `c*k*k + i*k + j`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// One region proposal in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoI {
    pub batch_index: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl RoI {
    pub fn new(batch_index: usize, x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let roi = RoI {
            batch_index,
            x1,
            y1,
            x2,
            y2,
        };
        roi.validate()?;
        Ok(roi)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x2 < self.x1 || self.y2 < self.y1 {
            return Err(Error::InvalidArgument(format!("malformed RoI {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }
}

/// Half-open pixel range `[h0, h1) x [w0, w1)` of one pooling bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BinRange {
    pub h0: usize,
    pub h1: usize,
    pub w0: usize,
    pub w1: usize,
}

impl BinRange {
    pub fn is_empty(&self) -> bool {
        self.h1 <= self.h0 || self.w1 <= self.w0
    }

    pub fn count(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.h1 - self.h0) * (self.w1 - self.w0)
        }
    }
}

fn quantize_axis(lo: f64, hi: f64, scale: f64) -> (i64, i64) {
    let start = (lo * scale).floor() as i64;
    let end = (hi * scale).ceil() as i64;
    (start, (end - start).max(1))
}

fn bin_axis(start: i64, extent: i64, bins: usize, index: usize, limit: usize) -> (usize, usize) {
    let bins = bins as i64;
    let i = index as i64;
    let lo = start + (i * extent).div_euclid(bins);
    let hi = start + ((i + 1) * extent + bins - 1).div_euclid(bins);
    let clip = |v: i64| v.clamp(0, limit as i64) as usize;
    (clip(lo), clip(hi))
}

/// Pixel ranges of a `bins_h x bins_w` grid over `roi`, row-major.
pub fn bin_ranges(
    roi: &RoI,
    bins_h: usize,
    bins_w: usize,
    spatial_scale: f64,
    height: usize,
    width: usize,
) -> Vec<BinRange> {
    let (ys, yext) = quantize_axis(roi.y1, roi.y2, spatial_scale);
    let (xs, xext) = quantize_axis(roi.x1, roi.x2, spatial_scale);
    let mut out = Vec::with_capacity(bins_h * bins_w);
    for i in 0..bins_h {
        let (h0, h1) = bin_axis(ys, yext, bins_h, i, height);
        for j in 0..bins_w {
            let (w0, w1) = bin_axis(xs, xext, bins_w, j, width);
            out.push(BinRange { h0, h1, w0, w1 });
        }
    }
    out
}

fn check_pool_args(features: &Tensor, roi: &RoI, spatial_scale: f64, op: &'static str) -> Result<()> {
    let s = features.shape();
    if s.h == 0 || s.w == 0 || s.c == 0 {
        return Err(shape_err(op, format!("degenerate feature map {s}")));
    }
    if !(spatial_scale > 0.0 && spatial_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{op}: spatial scale must be positive, got {spatial_scale}"
        )));
    }
    if roi.batch_index >= s.n {
        return Err(Error::InvalidArgument(format!(
            "{op}: RoI batch index {} but batch has {} images",
            roi.batch_index, s.n
        )));
    }
    roi.validate()
}

/// Backward metadata of [`roi_pool_max`]: flat feature offsets of each winning pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPoolIndices {
    pub feature_shape: Shape,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Per (channel, bin); `None` for empty bins.
    pub argmax: Vec<Option<usize>>,
}

/// Quantized RoI max pooling into an `out_h x out_w` grid.
///
/// Ties resolve to the first maximal pixel in row-major order.
pub fn roi_pool_max(
    features: &Tensor,
    roi: &RoI,
    out_h: usize,
    out_w: usize,
    spatial_scale: f64,
) -> Result<(Tensor, MaxPoolIndices)> {
    check_pool_args(features, roi, spatial_scale, "roi_pool_max")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("roi_pool_max: empty output grid".into()));
    }
    let s = features.shape();
    let bins = bin_ranges(roi, out_h, out_w, spatial_scale, s.h, s.w);
    let mut pooled = Tensor::zeros(Shape::new(1, s.c, out_h, out_w));
    let mut argmax = vec![None; s.c * bins.len()];
    let data = features.data();
    let plane = s.plane();
    let out = pooled.data_mut();
    for c in 0..s.c {
        let base = (roi.batch_index * s.c + c) * plane;
        for (b, bin) in bins.iter().enumerate() {
            if bin.is_empty() {
                continue;
            }
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for h in bin.h0..bin.h1 {
                for w in bin.w0..bin.w1 {
                    let idx = base + h * s.w + w;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
            }
            out[c * bins.len() + b] = best;
            argmax[c * bins.len() + b] = Some(best_idx);
        }
    }
    Ok((
        pooled,
        MaxPoolIndices {
            feature_shape: s,
            channels: s.c,
            out_h,
            out_w,
            argmax,
        },
    ))
}

/// Scatter-adds `upstream` into `grad` at the recorded argmax locations.
pub fn roi_pool_max_backward_into(indices: &MaxPoolIndices, upstream: &Tensor, grad: &mut Tensor) -> Result<()> {
    let expected = Shape::new(1, indices.channels, indices.out_h, indices.out_w);
    if upstream.shape() != expected {
        return Err(shape_err(
            "roi_pool_max_backward",
            format!("upstream {} but pooled output is {expected}", upstream.shape()),
        ));
    }
    if grad.shape() != indices.feature_shape {
        return Err(shape_err(
            "roi_pool_max_backward",
            format!("gradient buffer {} vs features {}", grad.shape(), indices.feature_shape),
        ));
    }
    let g = grad.data_mut();
    for (slot, &up) in indices.argmax.iter().zip(upstream.data()) {
        if let Some(idx) = slot {
            g[*idx] += up;
        }
    }
    Ok(())
}

pub fn roi_pool_max_backward(indices: &MaxPoolIndices, upstream: &Tensor, feature_shape: Shape) -> Result<Tensor> {
    if feature_shape != indices.feature_shape {
        return Err(shape_err(
            "roi_pool_max_backward",
            format!("feature shape {feature_shape} vs recorded {}", indices.feature_shape),
        ));
    }
    let mut grad = Tensor::zeros(feature_shape);
    roi_pool_max_backward_into(indices, upstream, &mut grad)?;
    Ok(grad)
}

/// Output of position-sensitive pooling for one RoI, plus what backward needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledLocal {
    /// (1, classes, k, k)
    pub values: Tensor,
    /// Source pixels averaged per bin, row-major; identical for every class.
    pub bin_source_counts: Vec<usize>,
    pub bins: Vec<BinRange>,
    pub k: usize,
    pub classes: usize,
    pub batch_index: usize,
    pub map_shape: Shape,
}

/// Position-sensitive RoI average pooling.
pub fn psroi_pool_avg(
    score_maps: &Tensor,
    roi: &RoI,
    k: usize,
    num_classes_plus_bg: usize,
    spatial_scale: f64,
) -> Result<PooledLocal> {
    check_pool_args(score_maps, roi, spatial_scale, "psroi_pool_avg")?;
    if k == 0 || num_classes_plus_bg == 0 {
        return Err(Error::InvalidArgument("psroi_pool_avg: k and class count must be >= 1".into()));
    }
    let s = score_maps.shape();
    let parts = k * k;
    if s.c != parts * num_classes_plus_bg {
        return Err(shape_err(
            "psroi_pool_avg",
            format!(
                "{} channels is not k^2 * classes = {} * {}",
                s.c, parts, num_classes_plus_bg
            ),
        ));
    }
    let bins = bin_ranges(roi, k, k, spatial_scale, s.h, s.w);
    let counts: Vec<usize> = bins.iter().map(BinRange::count).collect();
    let mut values = Tensor::zeros(Shape::new(1, num_classes_plus_bg, k, k));
    let data = score_maps.data();
    let plane = s.plane();
    let out = values.data_mut();
    for c in 0..num_classes_plus_bg {
        for (b, bin) in bins.iter().enumerate() {
            if counts[b] == 0 {
                continue;
            }
            let base = (roi.batch_index * s.c + c * parts + b) * plane;
            let mut sum = 0.0;
            for h in bin.h0..bin.h1 {
                let row = base + h * s.w;
                sum += data[row + bin.w0..row + bin.w1].iter().sum::<f64>();
            }
            out[c * parts + b] = sum / counts[b] as f64;
        }
    }
    Ok(PooledLocal {
        values,
        bin_source_counts: counts,
        bins,
        k,
        classes: num_classes_plus_bg,
        batch_index: roi.batch_index,
        map_shape: s,
    })
}

/// Spreads each bin's cotangent uniformly over its source pixels, accumulating into `grad`.
pub fn psroi_pool_avg_backward_into(pooled: &PooledLocal, upstream: &Tensor, grad: &mut Tensor) -> Result<()> {
    let parts = pooled.k * pooled.k;
    let expected = Shape::new(1, pooled.classes, pooled.k, pooled.k);
    if upstream.shape() != expected {
        return Err(shape_err(
            "psroi_pool_avg_backward",
            format!("upstream {} but pooled output is {expected}", upstream.shape()),
        ));
    }
    if grad.shape() != pooled.map_shape {
        return Err(shape_err(
            "psroi_pool_avg_backward",
            format!("gradient buffer {} vs score maps {}", grad.shape(), pooled.map_shape),
        ));
    }
    let s = pooled.map_shape;
    let plane = s.plane();
    let up = upstream.data();
    let g = grad.data_mut();
    for c in 0..pooled.classes {
        for (b, bin) in pooled.bins.iter().enumerate() {
            let n = pooled.bin_source_counts[b];
            if n == 0 {
                continue;
            }
            let share = up[c * parts + b] / n as f64;
            let base = (pooled.batch_index * s.c + c * parts + b) * plane;
            for h in bin.h0..bin.h1 {
                let row = base + h * s.w;
                for v in &mut g[row + bin.w0..row + bin.w1] {
                    *v += share;
                }
            }
        }
    }
    Ok(())
}

pub fn psroi_pool_avg_backward(pooled: &PooledLocal, upstream: &Tensor) -> Result<Tensor> {
    let mut grad = Tensor::zeros(pooled.map_shape);
    psroi_pool_avg_backward_into(pooled, upstream, &mut grad)?;
    Ok(grad)
}

/// Per-class mean over all `k*k` bins; empty bins contribute their zeros.
pub fn vote_average(pooled: &PooledLocal) -> Vec<f64> {
    let parts = pooled.k * pooled.k;
    pooled
        .values
        .data()
        .chunks(parts)
        .map(|bins| bins.iter().sum::<f64>() / parts as f64)
        .collect()
}

/// Cotangent of [`vote_average`] with respect to the pooled bins.
pub fn vote_average_backward(k: usize, upstream: &[f64]) -> Tensor {
    let parts = k * k;
    Tensor::from_fn(Shape::new(1, upstream.len(), k, k), |_, c, _, _| upstream[c] / parts as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn whole(h: usize, w: usize) -> RoI {
        RoI::new(0, 0.0, 0.0, w as f64, h as f64).unwrap()
    }

    #[test]
    fn max_pool_on_counting_map() {
        let f = Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w + 1) as f64);
        let (p, idx) = roi_pool_max(&f, &whole(4, 4), 2, 2, 1.0).unwrap();
        assert_eq!(p.data(), &[6.0, 8.0, 14.0, 16.0]);
        assert_eq!(idx.argmax, vec![Some(5), Some(7), Some(13), Some(15)]);
    }

    #[test]
    fn max_pool_of_constant() {
        let f = Tensor::full(Shape::new(2, 3, 6, 5), 0.75);
        let roi = RoI::new(1, 3.0, 1.0, 14.0, 20.0).unwrap();
        let (p, idx) = roi_pool_max(&f, &roi, 3, 3, 0.25).unwrap();
        for (v, a) in p.data().iter().zip(&idx.argmax) {
            if a.is_some() {
                assert_eq!(*v, 0.75);
            }
        }
    }

    #[test]
    fn quantization_enforces_unit_extent() {
        let roi = RoI::new(0, 2.2, 2.2, 2.2, 2.2).unwrap();
        let bins = bin_ranges(&roi, 1, 1, 1.0, 8, 8);
        assert_eq!(bins[0], BinRange { h0: 2, h1: 3, w0: 2, w1: 3 });
    }

    #[test]
    fn roi_outside_map_gives_empty_bins() {
        let f = Tensor::full(Shape::new(1, 1, 4, 4), 3.0);
        let roi = RoI::new(0, 40.0, 40.0, 60.0, 60.0).unwrap();
        let (p, idx) = roi_pool_max(&f, &roi, 2, 2, 1.0).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.0));
        assert!(idx.argmax.iter().all(Option::is_none));
        let g = roi_pool_max_backward(&idx, &Tensor::full(Shape::new(1, 1, 2, 2), 1.0), f.shape()).unwrap();
        assert_eq!(g.sum(), 0.0);
    }

    #[test]
    fn shared_argmax_accumulates() {
        // 1x3 map, two overlapping bins both see the peak in the middle
        let f = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0, 5.0, 1.0]).unwrap();
        let roi = RoI::new(0, 0.0, 0.0, 3.0, 1.0).unwrap();
        let (_, idx) = roi_pool_max(&f, &roi, 1, 2, 1.0).unwrap();
        assert_eq!(idx.argmax, vec![Some(1), Some(1)]);
        let up = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.25, 0.5]).unwrap();
        let g = roi_pool_max_backward(&idx, &up, f.shape()).unwrap();
        assert_eq!(g.data(), &[0.0, 0.75, 0.0]);
    }

    #[test]
    fn max_backward_of_zero_upstream() {
        let f = Tensor::from_fn(Shape::new(1, 2, 5, 5), |_, c, h, w| (c * 7 + h * 3 + w) as f64);
        let (_, idx) = roi_pool_max(&f, &whole(5, 5), 3, 3, 1.0).unwrap();
        let g = roi_pool_max_backward(&idx, &Tensor::zeros(Shape::new(1, 2, 3, 3)), f.shape()).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_maps_and_bad_scale_rejected() {
        let roi = whole(2, 2);
        assert!(roi_pool_max(&Tensor::zeros(Shape::new(1, 1, 0, 4)), &roi, 2, 2, 1.0).is_err());
        assert!(roi_pool_max(&Tensor::zeros(Shape::new(1, 1, 4, 4)), &roi, 2, 2, 0.0).is_err());
        let bad_batch = RoI::new(3, 0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(roi_pool_max(&Tensor::zeros(Shape::new(1, 1, 4, 4)), &bad_batch, 2, 2, 1.0).is_err());
        assert!(RoI::new(0, 2.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn psroi_reads_dedicated_channels() {
        let f = Tensor::from_fn(Shape::new(1, 4, 4, 4), |_, c, _, _| c as f64);
        let p = psroi_pool_avg(&f, &whole(4, 4), 2, 1, 1.0).unwrap();
        assert_eq!(p.values.data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.bin_source_counts, vec![4, 4, 4, 4]);
    }

    #[test]
    fn psroi_zero_maps() {
        let f = Tensor::zeros(Shape::new(1, 18, 6, 6));
        let p = psroi_pool_avg(&f, &whole(6, 6), 3, 2, 1.0).unwrap();
        assert!(p.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn psroi_rejects_bad_channel_layout() {
        let f = Tensor::zeros(Shape::new(1, 10, 4, 4));
        assert!(psroi_pool_avg(&f, &whole(4, 4), 2, 3, 1.0).is_err());
    }

    #[test]
    fn psroi_backward_edge_cases() {
        // single-pixel bins: a 2x2 map pooled at k = 2
        let f = Tensor::from_fn(Shape::new(1, 4, 2, 2), |_, c, h, w| (c + h + w) as f64);
        let p = psroi_pool_avg(&f, &whole(2, 2), 2, 1, 1.0).unwrap();
        assert_eq!(p.bin_source_counts, vec![1, 1, 1, 1]);
        let up = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = psroi_pool_avg_backward(&p, &up).unwrap();
        assert_eq!(g.at(0, 0, 0, 0), 1.0);
        assert_eq!(g.at(0, 1, 0, 1), 2.0);
        assert_eq!(g.at(0, 2, 1, 0), 3.0);
        assert_eq!(g.at(0, 3, 1, 1), 4.0);
        assert_eq!(g.sum(), 10.0);

        // RoI hanging off the map: empty bins carry no gradient
        let roi = RoI::new(0, 1.0, 1.0, 4.0, 4.0).unwrap();
        let p = psroi_pool_avg(&f, &roi, 2, 1, 1.0).unwrap();
        assert!(p.bin_source_counts.contains(&0));
        let g = psroi_pool_avg_backward(&p, &Tensor::full(Shape::new(1, 1, 2, 2), 1.0)).unwrap();
        let live = p.bin_source_counts.iter().filter(|&&n| n > 0).count() as f64;
        assert!((g.sum() - live).abs() < 1e-15);
    }

    #[test]
    fn voting_means() {
        let mk = |vals: Vec<f64>, k: usize| PooledLocal {
            values: Tensor::from_vec(Shape::new(1, vals.len() / (k * k), k, k), vals).unwrap(),
            bin_source_counts: vec![1; k * k],
            bins: vec![],
            k,
            classes: 1,
            batch_index: 0,
            map_shape: Shape::new(1, 1, 1, 1),
        };
        assert_eq!(vote_average(&mk(vec![1.0, 2.0, 3.0, 4.0], 2)), vec![2.5]);
        assert!((vote_average(&mk(vec![0.7; 9], 3))[0] - 0.7).abs() < 1e-15);
        let g = vote_average_backward(2, &[4.0, -8.0]);
        assert_eq!(g.data(), &[1.0, 1.0, 1.0, 1.0, -2.0, -2.0, -2.0, -2.0]);
    }

    #[test]
    fn exact_tiling_when_k_divides_extent() {
        let roi = whole(6, 9);
        let bins = bin_ranges(&roi, 3, 3, 1.0, 6, 9);
        assert_eq!(bins.iter().map(BinRange::count).sum::<usize>(), 54);
        for bin in &bins {
            assert!(!bin.is_empty());
        }
    }
}
