//! Brute-force references shared by the oracle tests and the acceptance report.
//! Each `check_*` runs a seeded batch of random cases and returns a short summary,
//! or a description of the first mismatch.

#![allow(dead_code)]

use couplenet::boxes::{apply_deltas, compute_iou, encode_targets, BBox};
use couplenet::coupling::{couple, normalize_branch, CouplingConfig, Normalization, Strategy};
use couplenet::eval::{average_precision, nms, ApMethod, Detection, GroundTruth};
use couplenet::gradcheck::micro_model_config;
use couplenet::heads::{global_branch, local_branch, Model};
use couplenet::rng::rng_from_seed;
use couplenet::roi::{psroi_pool_avg, roi_pool_max, vote_average, RoI};
use couplenet::tensor::{Shape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Does pixel `p` fall into bin `i` of `bins` along an axis spanning `[lo, hi]` in image
/// coordinates? Derived from the continuous bin bounds, independently of the library.
fn in_bin(p: usize, lo: f64, hi: f64, scale: f64, bins: usize, i: usize) -> bool {
    let start = (lo * scale).floor();
    let extent = ((hi * scale).ceil() - start).max(1.0);
    let rel = p as f64 - start;
    let b0 = (i as f64 * extent / bins as f64).floor();
    let b1 = ((i + 1) as f64 * extent / bins as f64).ceil();
    rel >= b0 && rel < b1
}

fn bin_pixels(roi: &RoI, s: Shape, scale: f64, bins: usize, i: usize, j: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    for h in 0..s.h {
        for w in 0..s.w {
            if in_bin(h, roi.y1, roi.y2, scale, bins, i) && in_bin(w, roi.x1, roi.x2, scale, bins, j) {
                px.push((h, w));
            }
        }
    }
    px
}

fn random_pool_roi<R: Rng>(rng: &mut R, n: usize, s: Shape, scale: f64) -> RoI {
    let iw = s.w as f64 / scale;
    let ih = s.h as f64 / scale;
    let batch = rng.random_range(0..n);
    if rng.random_bool(0.5) {
        // Inside the image.
        let (x1, y1) = (rng.random_range(0.0..iw), rng.random_range(0.0..ih));
        let (x2, y2) = (rng.random_range(x1..=iw), rng.random_range(y1..=ih));
        return RoI::new(batch, x1, y1, x2, y2).unwrap();
    }
    // Corners may leave the image on either side so that bins get clipped or emptied.
    let x1 = rng.random_range(-0.5 * iw..1.2 * iw);
    let y1 = rng.random_range(-0.5 * ih..1.2 * ih);
    let x2 = x1 + rng.random_range(0.0..1.2 * iw);
    let y2 = y1 + rng.random_range(0.0..1.2 * ih);
    RoI::new(batch, x1, y1, x2, y2).unwrap()
}

fn random_map<R: Rng>(rng: &mut R, shape: Shape, integer: bool) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| {
        if integer {
            rng.random_range(-2..3) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    })
}

fn is_clipped(roi: &RoI, s: Shape, scale: f64) -> bool {
    roi.x1 < 0.0 || roi.y1 < 0.0 || roi.x2 * scale > s.w as f64 || roi.y2 * scale > s.h as f64
}

/// RoI max pooling, bitwise, including the argmax (first maximum in row-major order).
pub fn check_roi_max_pool(cases: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let (mut empty_bins, mut clipped) = (0, 0);
    for case in 0..cases {
        let n = rng.random_range(1..3);
        let shape = Shape::new(n, rng.random_range(1..4), rng.random_range(1..10), rng.random_range(1..10));
        let scale = [1.0, 0.5, 0.25][rng.random_range(0..3)];
        // Small integer values force ties.
        let f = random_map(&mut rng, shape, case % 2 == 0);
        let roi = random_pool_roi(&mut rng, n, shape, scale);
        let k = rng.random_range(1..5);
        let (out, idx) = roi_pool_max(&f, &roi, k, k, scale).map_err(|e| e.to_string())?;
        clipped += is_clipped(&roi, shape, scale) as usize;
        for c in 0..shape.c {
            for i in 0..k {
                for j in 0..k {
                    let px = bin_pixels(&roi, shape, scale, k, i, j);
                    let slot = c * k * k + i * k + j;
                    let got = out.at(0, c, i, j);
                    if px.is_empty() {
                        empty_bins += 1;
                        ensure!(got.to_bits() == 0f64.to_bits() && idx.argmax[slot].is_none(), "case {case}: empty bin gave {got}");
                        continue;
                    }
                    let mut best = (f64::NEG_INFINITY, 0);
                    for (h, w) in px {
                        let v = f.at(roi.batch_index, c, h, w);
                        if v > best.0 {
                            best = (v, f.offset(roi.batch_index, c, h, w));
                        }
                    }
                    ensure!(got.to_bits() == best.0.to_bits(), "case {case} {roi:?}: {got} vs {}", best.0);
                    ensure!(idx.argmax[slot] == Some(best.1), "case {case}: argmax {:?} vs {}", idx.argmax[slot], best.1);
                }
            }
        }
    }
    ensure!(empty_bins > 0, "no empty bins exercised");
    ensure!(clipped > cases / 4, "only {clipped} border-clipped RoIs");
    Ok(format!("{cases} cases bitwise equal ({clipped} clipped RoIs, {empty_bins} empty bins)"))
}

/// PSRoI average pooling and voting within 1e-12.
pub fn check_psroi_avg_pool(cases: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let (mut empty_bins, mut clipped, mut worst) = (0, 0, 0.0f64);
    for case in 0..cases {
        let n = rng.random_range(1..3);
        let k = rng.random_range(1..4);
        let classes = rng.random_range(1..4);
        let shape = Shape::new(n, k * k * classes, rng.random_range(1..10), rng.random_range(1..10));
        let scale = [1.0, 0.5, 0.25][rng.random_range(0..3)];
        let f = random_map(&mut rng, shape, false);
        let roi = random_pool_roi(&mut rng, n, shape, scale);
        clipped += is_clipped(&roi, shape, scale) as usize;
        let pooled = psroi_pool_avg(&f, &roi, k, classes, scale).map_err(|e| e.to_string())?;
        let mut votes = vec![0.0; classes];
        for c in 0..classes {
            for i in 0..k {
                for j in 0..k {
                    let px = bin_pixels(&roi, shape, scale, k, i, j);
                    let expected = if px.is_empty() {
                        empty_bins += 1;
                        0.0
                    } else {
                        let ch = c * k * k + i * k + j;
                        px.iter().map(|&(h, w)| f.at(roi.batch_index, ch, h, w)).sum::<f64>() / px.len() as f64
                    };
                    let err = (pooled.values.at(0, c, i, j) - expected).abs();
                    worst = worst.max(err);
                    ensure!(err <= 1e-12, "case {case}: bin ({c},{i},{j}) off by {err}");
                    votes[c] += expected;
                }
            }
        }
        for (c, v) in vote_average(&pooled).iter().enumerate() {
            let err = (v - votes[c] / (k * k) as f64).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-12, "case {case}: vote {c} off by {err}");
        }
    }
    ensure!(empty_bins > 0, "no empty bins exercised");
    Ok(format!("{cases} cases, max error {worst:.1e} ({clipped} clipped RoIs, {empty_bins} empty bins)"))
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let x1 = rng.random_range(0.0..40.0);
    let y1 = rng.random_range(0.0..40.0);
    BBox::new(x1, y1, x1 + rng.random_range(1.0..25.0), y1 + rng.random_range(1.0..25.0))
}

fn random_dets<R: Rng>(rng: &mut R, n: usize, images: usize, classes: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| Detection {
            image: rng.random_range(0..images),
            class: rng.random_range(1..=classes),
            // Coarse scores so that ties occur.
            score: rng.random_range(0..8) as f64 / 8.0,
            bbox: random_box(rng),
        })
        .collect()
}

/// Highest score first, lowest index among equal scores.
pub fn beats(dets: &[Detection], a: usize, b: usize) -> bool {
    dets[a].score > dets[b].score || (dets[a].score == dets[b].score && a < b)
}

/// Repeatedly takes the best remaining detection of a group and deletes everything it
/// overlaps by more than the threshold.
pub fn nms_reference(dets: &[Detection], thr: f64) -> Vec<usize> {
    let mut groups: Vec<(usize, usize)> = dets.iter().map(|d| (d.image, d.class)).collect();
    groups.sort();
    groups.dedup();
    let mut kept = Vec::new();
    for g in groups {
        let mut alive: Vec<usize> = (0..dets.len()).filter(|&i| (dets[i].image, dets[i].class) == g).collect();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if beats(dets, i, best) {
                    best = i;
                }
            }
            kept.push(best);
            alive.retain(|&i| i != best && compute_iou(&dets[best].bbox, &dets[i].bbox) <= thr);
        }
    }
    kept
}

pub fn ap_reference(dets: &[Detection], gts: &[GroundTruth], class: usize, thr: f64, method: ApMethod) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class == class).collect();
    let gt: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gt.is_empty() || order.is_empty() {
        return 0.0;
    }
    // Selection sort by the same total order as `beats`.
    for a in 0..order.len() {
        for b in a + 1..order.len() {
            if beats(dets, order[b], order[a]) {
                order.swap(a, b);
            }
        }
    }
    let mut used = vec![false; gt.len()];
    let mut hits = Vec::new();
    for &i in &order {
        let d = &dets[i];
        // Best IoU among unused same-image ground truth, earliest among equals.
        let mut pick: Option<usize> = None;
        for g in 0..gt.len() {
            if used[g] || gt[g].image != d.image || compute_iou(&d.bbox, &gt[g].bbox) < thr {
                continue;
            }
            if pick.is_none_or(|p| compute_iou(&d.bbox, &gt[g].bbox) > compute_iou(&d.bbox, &gt[p].bbox)) {
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            used[g] = true;
        }
        hits.push(pick.is_some());
    }
    let n = hits.len();
    let tp: Vec<usize> = (0..n).map(|i| hits[..=i].iter().filter(|&&h| h).count()).collect();
    let precision = |i: usize| tp[i] as f64 / (i + 1) as f64;
    let recall = |i: usize| tp[i] as f64 / gt.len() as f64;
    let envelope = |i: usize| (i..n).map(precision).fold(f64::NEG_INFINITY, f64::max);
    match method {
        ApMethod::AllPoints => {
            let mut ap = 0.0;
            for i in 0..n {
                let prev = if i == 0 { 0.0 } else { recall(i - 1) };
                ap += (recall(i) - prev) * envelope(i);
            }
            ap
        }
        ApMethod::ElevenPoint => {
            let mut total = 0.0;
            for t in 0..=10 {
                let t = t as f64 / 10.0;
                total += (0..n).find(|&i| recall(i) >= t).map_or(0.0, envelope);
            }
            total / 11.0
        }
    }
}

pub fn check_nms(sets: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut suppressed = 0;
    for case in 0..sets {
        let n = rng.random_range(0..25);
        let dets = random_dets(&mut rng, n, 2, 2);
        let thr = rng.random_range(0.1..0.9);
        let got = nms(&dets, thr).map_err(|e| e.to_string())?;
        let want = nms_reference(&dets, thr);
        ensure!(got == want, "set {case}: {got:?} vs {want:?}");
        suppressed += n - got.len();
    }
    Ok(format!("{sets} sets identical ({suppressed} suppressions)"))
}

pub fn check_ap(sets: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    for case in 0..sets {
        let n = rng.random_range(0..20);
        let mut dets = random_dets(&mut rng, n, 3, 2);
        let gts: Vec<GroundTruth> = (0..rng.random_range(0..8))
            .map(|_| GroundTruth {
                image: rng.random_range(0..3),
                class: rng.random_range(1..=2),
                bbox: random_box(&mut rng),
            })
            .collect();
        // Put some detections on top of ground truth so that hits happen.
        for (d, g) in dets.iter_mut().zip(&gts) {
            if rng.random_bool(0.6) {
                d.image = g.image;
                d.class = g.class;
                d.bbox = BBox::new(g.bbox.x1 + 0.5, g.bbox.y1, g.bbox.x2, g.bbox.y2 + 0.5);
            }
        }
        let thr = [0.3, 0.5, 0.7][case % 3];
        for method in [ApMethod::AllPoints, ApMethod::ElevenPoint] {
            for class in 1..=2 {
                let got = average_precision(&dets, &gts, class, thr, method);
                let want = ap_reference(&dets, &gts, class, thr, method);
                ensure!(got.to_bits() == want.to_bits(), "set {case} {method:?} class {class}: {got} vs {want}");
            }
        }
    }
    Ok(format!("{sets} sets bitwise equal (all-points and 11-point)"))
}

pub fn check_box_codec(pairs: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let roi = random_box(&mut rng);
        let gt = random_box(&mut rng);
        let back = apply_deltas(&roi, &encode_targets(&roi, &gt).map_err(|e| e.to_string())?);
        for (a, b) in [(back.x1, gt.x1), (back.y1, gt.y1), (back.x2, gt.x2), (back.y2, gt.y2)] {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-9, "round-trip error {worst:.2e}");
    Ok(format!("{pairs} pairs, max error {worst:.1e}"))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Argmax of L2-normalized sum coupling under independent positive rescaling of each branch.
pub fn check_l2_sum_argmax(vectors: usize, seed: u64) -> Check {
    let mut rng = rng_from_seed(seed);
    for case in 0..vectors {
        let len = rng.random_range(2..8);
        let mut draw = || -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (local, global) = (draw(), draw());
        let a: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let b: f64 = 10f64.powf(rng.random_range(-3.0..3.0));
        let coupled = |l: &[f64], g: &[f64]| -> Result<Vec<f64>, String> {
            let l = normalize_branch(l, Normalization::L2, None).map_err(|e| e.to_string())?;
            let g = normalize_branch(g, Normalization::L2, None).map_err(|e| e.to_string())?;
            couple(&l, &g, Strategy::Sum).map_err(|e| e.to_string())
        };
        let base = coupled(&local, &global)?;
        let scaled_l: Vec<f64> = local.iter().map(|v| a * v).collect();
        let scaled_g: Vec<f64> = global.iter().map(|v| b * v).collect();
        let rescaled = coupled(&scaled_l, &scaled_g)?;
        ensure!(argmax(&base) == argmax(&rescaled), "vector {case}: {base:?} vs {rescaled:?}");
    }
    Ok(format!("{vectors} vector pairs, argmax unchanged"))
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn random_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| rng.random_range(0.0..1.0))
}

pub fn random_rois(seed: u64, n: usize, w: f64, h: f64) -> Vec<RoI> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| {
            let x1 = rng.random_range(0.0..w - 6.0);
            let y1 = rng.random_range(0.0..h - 6.0);
            let x2 = rng.random_range(x1 + 4.0..w);
            let y2 = rng.random_range(y1 + 4.0..h);
            RoI::new(0, x1, y1, x2, y2).unwrap()
        })
        .collect()
}

/// Local-only and global-only models against the standalone branch functions, bitwise.
pub fn check_single_branch(models: u64) -> Check {
    let (h, w) = (36, 44);
    let mut compared = 0;
    for m in 0..models {
        let img = random_image(100 + m, h, w);
        let rois = random_rois(200 + m, 12, w as f64, h as f64);
        for context in [false, true] {
            for coupling in [CouplingConfig::local_only(), CouplingConfig::global_only()] {
                let cfg = micro_model_config(coupling, context);
                let model = Model::new(cfg.clone(), 300 + m).map_err(|e| e.to_string())?;
                let (features, _) = model.backbone_forward(&img).map_err(|e| e.to_string())?;
                let outputs = model.predict(&img, &rois).map_err(|e| e.to_string())?;
                for (roi, out) in rois.iter().zip(&outputs) {
                    let (cls, bbox) = if coupling.enable_local {
                        local_branch(&features, roi, &model.head, cfg.k, cfg.num_classes)
                    } else {
                        global_branch(&features, roi, &model.head, cfg.k, context, w as f64, h as f64)
                    }
                    .map_err(|e| e.to_string())?;
                    ensure!(
                        bits(&out.cls_scores) == bits(&cls) && bits(&out.bbox_deltas) == bits(&bbox),
                        "{} (context {context}) differs from the isolated branch",
                        coupling.label()
                    );
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} RoI outputs bitwise equal"))
}
