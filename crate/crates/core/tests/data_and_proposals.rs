//! Statistical and oracle checks of the synthetic scenes, proposals and target assignment.

use couplenet::boxes::{compute_iou, encode_targets, BBox};
use couplenet::proposals::{assign_targets, generate_proposals, ProposalConfig, RoITarget};
use couplenet::rng::rng_from_seed;
use couplenet::roi::RoI;
use couplenet::synth::{
    generate_scene, rasterize, Dataset, DatasetConfig, RenderConfig, Scene, SceneConfig, SceneObject, ShapeClass,
};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn occlusion_rate_matches_configuration() {
    for p in [0.2, 0.5, 0.8] {
        let cfg = SceneConfig {
            occlusion_prob: p,
            ..SceneConfig::default()
        };
        let (mut occluded, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            for o in generate_scene(seed, &cfg).unwrap().objects {
                total += 1;
                occluded += !o.occluders.is_empty() as usize;
            }
        }
        let rate = occluded as f64 / total as f64;
        assert!((rate - p).abs() <= 0.03, "p={p}: observed {rate} over {total} objects");
    }
}

#[test]
fn scene_invariants_hold() {
    let cfg = SceneConfig::default();
    for seed in 0..500 {
        let s = generate_scene(seed, &cfg).unwrap();
        assert!((1..=4).contains(&s.objects.len()), "seed {seed}");
        let image = BBox::new(0.0, 0.0, s.image_w as f64, s.image_h as f64);
        for o in &s.objects {
            assert!(o.bbox.intersection(&image) > 0.0);
            assert!((0.0..=0.6).contains(&o.truncation));
            for occ in &o.occluders {
                let frac = occ.area() / o.bbox.area();
                assert!((0.2 - 1e-9..=0.5 + 1e-9).contains(&frac), "occluder covers {frac}");
            }
        }
    }
    let clean = SceneConfig {
        occlusion_prob: 0.0,
        truncation_prob: 0.0,
        ..SceneConfig::default()
    };
    for seed in 0..200 {
        let s = generate_scene(seed, &clean).unwrap();
        let image = BBox::new(0.0, 0.0, s.image_w as f64, s.image_h as f64);
        assert!(s.objects.iter().all(|o| o.occluders.is_empty() && image.contains(&o.bbox)));
    }
}

#[test]
fn disk_pixel_count_matches_its_area() {
    let render = RenderConfig {
        noise_level: 0.0,
        ..RenderConfig::default()
    };
    for (w, h) in [(20.0, 20.0), (31.0, 17.0), (12.5, 26.0)] {
        let bbox = BBox::new(7.3, 5.6, 7.3 + w, 5.6 + h);
        let scene = Scene {
            seed: 1,
            image_w: 48,
            image_h: 40,
            objects: vec![SceneObject {
                class: ShapeClass::Disk,
                bbox,
                occluders: vec![],
                truncation: 0.0,
            }],
        };
        let img = rasterize(&scene, &render).unwrap();
        let count = img.data().iter().filter(|&&v| v == render.disk).count() as f64;
        let area = std::f64::consts::PI * 0.25 * w * h;
        assert!((count - area).abs() <= 0.05 * area, "{w}x{h}: {count} pixels vs {area}");
    }
}

/// Normalized intensity histogram of the crop of each un-occluded, untruncated
/// object, classified by the nearest class centroid.
#[test]
fn classes_are_separable_by_intensity_histograms() {
    let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
    const BINS: usize = 12;
    let features = |scenes: &[Scene]| -> Vec<(usize, [f64; BINS])> {
        let mut out = Vec::new();
        for s in scenes {
            let img = rasterize(s, &ds.config.render).unwrap();
            for o in s.objects.iter().filter(|o| o.occluders.is_empty() && o.truncation == 0.0) {
                let mut hist = [0.0; BINS];
                let mut n = 0.0;
                for y in o.bbox.y1.ceil() as usize..(o.bbox.y2.floor() as usize).min(s.image_h) {
                    for x in o.bbox.x1.ceil() as usize..(o.bbox.x2.floor() as usize).min(s.image_w) {
                        let v = img.at(0, 0, y, x);
                        hist[((v * BINS as f64) as usize).min(BINS - 1)] += 1.0;
                        n += 1.0;
                    }
                }
                if n > 0.0 {
                    hist.iter_mut().for_each(|b| *b /= n);
                    out.push((o.class.label(), hist));
                }
            }
        }
        out
    };
    let train = features(&ds.train);
    let test = features(&ds.test);
    let mut centroids = [[0.0; BINS]; 5];
    let mut counts = [0.0f64; 5];
    for (label, h) in &train {
        counts[*label] += 1.0;
        for (c, v) in centroids[*label].iter_mut().zip(h) {
            *c += v;
        }
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1.0));
    }
    let dist = |a: &[f64; BINS], b: &[f64; BINS]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let correct = test
        .iter()
        .filter(|(label, h)| (1..5).min_by(|&a, &b| dist(h, &centroids[a]).total_cmp(&dist(h, &centroids[b]))) == Some(*label))
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(test.len() > 100);
    assert!(acc >= 0.95, "histogram classifier accuracy {acc} on {} crops", test.len());
}

#[test]
fn class_counts_are_near_uniform() {
    let ds = Dataset::generate(&DatasetConfig::default()).unwrap();
    let mut counts = [0usize; 4];
    for s in &ds.train {
        for o in &s.objects {
            counts[o.class.label() - 1] += 1;
        }
    }
    let mean = counts.iter().sum::<usize>() as f64 / 4.0;
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 0.1 * mean, "class {i}: {c} vs uniform {mean} ({counts:?})");
    }
}

#[test]
fn manifest_regenerates_bit_exactly() {
    let cfg = DatasetConfig {
        train_scenes: 40,
        test_scenes: 10,
        ..DatasetConfig::default()
    };
    let ds = Dataset::generate(&cfg).unwrap();
    let manifest = ds.manifest();
    let again = Dataset::from_manifest(&manifest).unwrap();
    assert_eq!(again, ds);
    assert_eq!(again.manifest().to_json().unwrap(), manifest.to_json().unwrap());
    for (a, b) in ds.test.iter().zip(&again.test) {
        let (x, y) = (rasterize(a, &cfg.render).unwrap(), rasterize(b, &cfg.render).unwrap());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn small_jitter_keeps_positives_foreground() {
    let cfg = ProposalConfig {
        jitter_scale: 0.05,
        positives_per_gt: 10,
        negatives_per_image: 0,
        ..ProposalConfig::default()
    };
    let (mut good, mut total) = (0usize, 0usize);
    let mut seed = 0;
    while total < 10_000 {
        let scene = generate_scene(seed, &SceneConfig::default()).unwrap();
        let gts = scene.ground_truth();
        let rois = generate_proposals(&scene, &cfg, seed + 7).unwrap();
        for (i, roi) in rois.iter().enumerate() {
            let gt = gts[i / cfg.positives_per_gt].1;
            total += 1;
            good += (compute_iou(&BBox::from(roi), &gt) >= 0.5) as usize;
        }
        seed += 1;
    }
    let rate = good as f64 / total as f64;
    assert!(rate >= 0.99, "{rate} of {total} jittered positives reach IoU 0.5");
}

#[test]
fn zero_jitter_and_empty_scenes() {
    let scene = generate_scene(3, &SceneConfig::default()).unwrap();
    let cfg = ProposalConfig {
        jitter_scale: 0.0,
        positives_per_gt: 2,
        negatives_per_image: 5,
        ..ProposalConfig::default()
    };
    let rois = generate_proposals(&scene, &cfg, 1).unwrap();
    assert_eq!(rois.len(), 2 * scene.objects.len() + 5);
    for (i, (_, gt)) in scene.ground_truth().iter().enumerate() {
        assert_eq!(BBox::from(&rois[2 * i]), *gt);
    }
    let empty = Scene {
        objects: vec![],
        ..scene
    };
    assert_eq!(generate_proposals(&empty, &cfg, 1).unwrap().len(), 5);
    assert_eq!(generate_proposals(&empty, &cfg, 1).unwrap(), generate_proposals(&empty, &cfg, 1).unwrap());
}

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

proptest! {
    /// Every RoI against every ground truth, then the threshold rules applied to the maximum.
    #[test]
    fn assignment_matches_all_pairs_oracle(
        rois in prop::collection::vec(arb_box(), 0..20),
        gts in prop::collection::vec((1..5usize, arb_box()), 0..5),
        fg in 0.3..0.9f64,
        lo_frac in 0.0..0.9f64,
    ) {
        let lo = lo_frac * fg * 0.5;
        let hi = fg;
        let rois: Vec<RoI> = rois.iter().map(|b| b.to_roi(0)).collect();
        let targets = assign_targets(&rois, &gts, fg, (lo, hi)).unwrap();
        prop_assert_eq!(targets.len(), rois.len());
        for (roi, t) in rois.iter().zip(&targets) {
            let rb = BBox::from(roi);
            let ious: Vec<f64> = gts.iter().map(|(_, g)| compute_iou(&rb, g)).collect();
            let max = ious.iter().copied().fold(0.0, f64::max);
            let first = ious.iter().position(|&v| v == max);
            match t {
                RoITarget::Foreground { label, deltas, matched_gt } => {
                    prop_assert!(max >= fg);
                    prop_assert_eq!(Some(*matched_gt), first);
                    prop_assert_eq!(*label, gts[*matched_gt].0);
                    prop_assert_eq!(*deltas, encode_targets(&rb, &gts[*matched_gt].1).unwrap());
                }
                RoITarget::Background { .. } => prop_assert!(max >= lo && max < hi),
                RoITarget::Ignored => prop_assert!(max < lo),
            }
        }
    }
}

#[test]
fn assignment_threshold_edges() {
    let gt = BBox::new(10.0, 10.0, 20.0, 20.0);
    let same = gt.to_roi(0);
    let far = BBox::new(40.0, 40.0, 50.0, 50.0).to_roi(0);
    let t = assign_targets(&[same, far], &[(3, gt)], 0.5, (0.1, 0.5)).unwrap();
    assert_eq!(t[0].label(), Some(3));
    assert_eq!(t[0].regression_target(), Some(&[0.0; 4]));
    assert_eq!(t[1], RoITarget::Ignored);
    let t = assign_targets(&[far], &[(3, gt)], 0.5, (0.0, 0.5)).unwrap();
    assert_eq!(t[0].label(), Some(0));
    let mut rng = rng_from_seed(5);
    assert!(assign_targets(&[far], &[], 0.5, (0.0, rng.random_range(0.6..0.9))).is_err());
}
