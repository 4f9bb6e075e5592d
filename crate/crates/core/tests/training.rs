//! Optimizer, loss and training-loop checks, plus checkpoint round trips.

use couplenet::checkpoint;
use couplenet::heads::{Model, ModelConfig, RoIOutput};
use couplenet::nn::{smooth_l1, softmax_cross_entropy};
use couplenet::proposals::{ProposalConfig, RoITarget};
use couplenet::rng::rng_from_seed;
use couplenet::synth::{Dataset, DatasetConfig};
use couplenet::train::{multitask_loss, ohem_select, run_training, sgd_step, LossWeights, LrPhase, TrainConfig};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn momentum_sgd_reaches_the_bottom_of_a_quadratic_bowl() {
    let mut rng = rng_from_seed(41);
    let curvature: Vec<f64> = (0..8).map(|_| rng.random_range(0.5..2.0)).collect();
    let minimum: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut p = vec![0.0; 8];
    let mut v = vec![0.0; 8];
    let mut converged_at = None;
    for step in 1..=500 {
        let g: Vec<f64> = p.iter().zip(&curvature).zip(&minimum).map(|((x, a), c)| a * (x - c)).collect();
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        if p.iter().zip(&minimum).all(|(x, c)| (x - c).abs() <= 1e-6) {
            converged_at.get_or_insert(step);
        }
    }
    assert!(converged_at.is_some(), "not within 1e-6 after 500 steps: {p:?} vs {minimum:?}");
    assert!(p.iter().zip(&minimum).all(|(x, c)| (x - c).abs() <= 1e-6));
}

fn ohem_oracle(losses: &[f64], b: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&i, &j| losses[j].partial_cmp(&losses[i]).unwrap().then(i.cmp(&j)));
    idx.truncate(b);
    idx.sort();
    idx
}

proptest! {
    #[test]
    fn ohem_matches_a_full_sort(
        losses in prop::collection::vec((0..6u8).prop_map(|v| v as f64 * 0.5), 0..40),
        b in 1..50usize,
    ) {
        prop_assert_eq!(ohem_select(&losses, b), ohem_oracle(&losses, b));
    }
}

fn random_output<R: Rng>(rng: &mut R, classes: usize) -> RoIOutput {
    RoIOutput {
        cls_scores: (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect(),
        bbox_deltas: [0; 4].map(|_| rng.random_range(-2.0..2.0)),
        branch_scores: Default::default(),
    }
}

#[test]
fn multitask_loss_composes_its_parts() {
    let mut rng = rng_from_seed(42);
    for _ in 0..200 {
        let n = rng.random_range(1..12);
        let outputs: Vec<RoIOutput> = (0..n).map(|_| random_output(&mut rng, 5)).collect();
        let targets: Vec<RoITarget> = (0..n)
            .map(|i| match rng.random_range(0..3) {
                0 => RoITarget::Ignored,
                1 => RoITarget::Background { matched_gt: None },
                _ => RoITarget::Foreground {
                    label: rng.random_range(1..5),
                    deltas: [0; 4].map(|_| rng.random_range(-1.0..1.0)),
                    matched_gt: i,
                },
            })
            .collect();
        let w = LossWeights {
            cls: rng.random_range(0.1..2.0),
            bbox: rng.random_range(0.1..2.0),
        };
        let loss = multitask_loss(&outputs, &targets, w).unwrap();

        let (mut ce, mut n_cls, mut sl1, mut n_fg) = (0.0, 0, 0.0, 0);
        for (o, t) in outputs.iter().zip(&targets) {
            if let Some(label) = t.label() {
                ce += softmax_cross_entropy(&o.cls_scores, label).unwrap().0;
                n_cls += 1;
            }
            if let Some(d) = t.regression_target() {
                sl1 += smooth_l1(&o.bbox_deltas, d).unwrap().0;
                n_fg += 1;
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let expected = w.cls * mean(ce, n_cls) + w.bbox * mean(sl1, n_fg);
        assert!((loss.total - expected).abs() <= 1e-12 * expected.max(1.0));

        // Cotangents against central differences of the total.
        let h = 1e-6;
        for (r, t) in targets.iter().enumerate() {
            let Some(g) = &loss.grads[r] else {
                assert_eq!(*t, RoITarget::Ignored);
                continue;
            };
            for c in 0..5 {
                let mut plus = outputs.clone();
                plus[r].cls_scores[c] += h;
                let mut minus = outputs.clone();
                minus[r].cls_scores[c] -= h;
                let fd = (multitask_loss(&plus, &targets, w).unwrap().total
                    - multitask_loss(&minus, &targets, w).unwrap().total)
                    / (2.0 * h);
                assert!((fd - g.cls[c]).abs() <= 1e-6, "cls grad {fd} vs {}", g.cls[c]);
            }
            for c in 0..4 {
                let mut plus = outputs.clone();
                plus[r].bbox_deltas[c] += h;
                let mut minus = outputs.clone();
                minus[r].bbox_deltas[c] -= h;
                let fd = (multitask_loss(&plus, &targets, w).unwrap().total
                    - multitask_loss(&minus, &targets, w).unwrap().total)
                    / (2.0 * h);
                assert!((fd - g.bbox[c]).abs() <= 1e-5, "bbox grad {fd} vs {}", g.bbox[c]);
            }
        }
    }
}

fn small_dataset() -> Dataset {
    Dataset::generate(&DatasetConfig {
        train_scenes: 12,
        test_scenes: 4,
        ..DatasetConfig::default()
    })
    .unwrap()
}

fn short_schedule(iterations: usize) -> TrainConfig {
    TrainConfig {
        lr_schedule: vec![LrPhase { iterations, lr: 0.002 }],
        log_every: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let ds = small_dataset();
    let model = Model::new(ModelConfig::default(), 3).unwrap();
    let cfg = TrainConfig {
        lr_schedule: vec![],
        ..TrainConfig::default()
    };
    let out = run_training(&ds, model.clone(), &cfg, &ProposalConfig::default(), 3, |_| {}).unwrap();
    assert_eq!(out.model, model);
    assert!(out.log.is_empty());
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let ds = small_dataset();
    let cfg = short_schedule(60);
    let run = || {
        let model = Model::new(ModelConfig::default(), 4).unwrap();
        run_training(&ds, model, &cfg, &ProposalConfig::default(), 4, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model, b.model);
    let lines = |o: &couplenet::train::TrainOutcome| -> Vec<String> {
        o.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect()
    };
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(a.log.len(), 6);
    assert!(a.log.last().unwrap().loss < a.log[0].loss, "{:?}", a.log);
}

#[test]
fn checkpoint_round_trips_a_trained_model() {
    let ds = small_dataset();
    let model = Model::new(ModelConfig::default(), 5).unwrap();
    let trained = run_training(&ds, model, &short_schedule(10), &ProposalConfig::default(), 5, |_| {})
        .unwrap()
        .model;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&trained, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, trained);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(checkpoint::to_bytes(&loaded).unwrap(), bytes);
    assert_eq!(&bytes[..8], checkpoint::MAGIC);

    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(checkpoint::load(&path).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, extra).unwrap();
    assert!(checkpoint::load(&path).is_err());
    assert!(checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}
