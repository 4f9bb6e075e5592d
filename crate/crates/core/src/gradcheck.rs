//! Central finite-difference checks of every backward pass.
//!
//! Each suite draws seeded random inputs, takes a scalar objective (a random
//! projection of the op's output, or the training loss for the micro-model) and
//! compares analytic gradients with `(f(x + h) - f(x - h)) / 2h`.

use rand::Rng;
use serde::Serialize;

use crate::boxes::BBox;
use crate::coupling::{
    couple, couple_backward, normalize_branch, normalize_branch_backward, AffineScale, CouplingConfig, Normalization,
    Strategy,
};
use crate::error::{Error, Result};
use crate::heads::{Model, ModelConfig};
use crate::nn::{conv2d, conv2d_backward, relu, relu_backward, smooth_l1, softmax_cross_entropy, ConvParams};
use crate::proposals::assign_targets;
use crate::rng::{self, DetRng};
use crate::roi::{psroi_pool_avg, psroi_pool_avg_backward, roi_pool_max, roi_pool_max_backward, RoI};
use crate::tensor::{Shape, Tensor};
use crate::train::{multitask_loss, LossWeights};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Absolute differences below this always pass (finite-difference round-off).
pub const ABS_FLOOR: f64 = 1e-9;

pub const SUITES: [&str; 10] = [
    "conv2d",
    "relu",
    "softmax_ce",
    "smooth_l1",
    "roi_pool",
    "psroi",
    "normalize",
    "couple",
    "context",
    "model",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because the step crossed a non-differentiable point.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    /// Run only suites whose name contains this string.
    pub scope: Option<String>,
    /// Test hook: perturb one analytic gradient entry of the named suite.
    pub corrupt: Option<String>,
    pub seed: u64,
}

/// Error normalized so that `<= tol` means pass.
pub fn rel_error(analytic: f64, numeric: f64, tol: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(ABS_FLOOR / tol);
    (analytic - numeric).abs() / denom
}

struct Acc {
    name: &'static str,
    tol: f64,
    checked: usize,
    skipped: usize,
    max_err: f64,
    corrupt: bool,
}

impl Acc {
    fn new(name: &'static str, tol: f64, opts: &GradcheckOptions) -> Self {
        Acc {
            name,
            tol,
            checked: 0,
            skipped: 0,
            max_err: 0.0,
            corrupt: opts.corrupt.as_deref() == Some(name),
        }
    }

    fn compare(&mut self, analytic: f64, numeric: f64) {
        let a = if self.corrupt && self.checked == 0 {
            analytic + 1e-2 * (1.0 + analytic.abs())
        } else {
            analytic
        };
        self.checked += 1;
        self.max_err = self.max_err.max(rel_error(a, numeric, self.tol));
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name.to_string(),
            checked: self.checked,
            skipped: self.skipped,
            max_rel_error: self.max_err,
            tolerance: self.tol,
            passed: self.checked > 0 && self.max_err <= self.tol,
        }
    }
}

/// Central difference of `f` with respect to `x[i]`.
fn central(x: &mut [f64], i: usize, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + STEP;
    let up = f(x);
    x[i] = orig - STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * STEP)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(r: &mut DetRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn random_tensor(r: &mut DetRng, shape: Shape) -> Tensor {
    Tensor::from_vec(shape, random_vec(r, shape.numel())).expect("finite")
}

/// Values spaced far apart relative to the step, so max pooling has no near-ties.
fn spread_tensor(r: &mut DetRng, shape: Shape) -> Tensor {
    let n = shape.numel();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::from_vec(shape, v).expect("finite")
}

/// Checks the VJP `backward(r)` of `forward` at `x` against finite differences of `r . forward(x)`.
fn check_vjp(
    acc: &mut Acc,
    x: &mut [f64],
    analytic: &[f64],
    proj: &[f64],
    mut forward: impl FnMut(&[f64]) -> Vec<f64>,
) {
    for i in 0..x.len() {
        let n = central(x, i, |x| dot(proj, &forward(x)));
        acc.compare(analytic[i], n);
    }
}

fn suite_conv(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("conv2d", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-conv", 0);
    for &(stride, pad, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
        let x = random_tensor(&mut r, Shape::new(2, 3, 7, 6));
        let mut p = ConvParams::zeros(4, 3, k, k, stride, pad);
        p.weight = random_tensor(&mut r, p.weight.shape());
        p.bias = random_vec(&mut r, 4);
        let y = conv2d(&x, &p)?;
        let proj = random_tensor(&mut r, y.shape());
        let g = conv2d_backward(&x, &p, &proj)?;
        let (xs, ws) = (x.shape(), p.weight.shape());

        let mut xv = x.data().to_vec();
        check_vjp(&mut acc, &mut xv, g.input.data(), proj.data(), |v| {
            conv2d(&Tensor::from_vec(xs, v.to_vec()).expect("finite"), &p).expect("valid").into_vec()
        });
        let mut wv = p.weight.data().to_vec();
        check_vjp(&mut acc, &mut wv, g.weight.data(), proj.data(), |v| {
            let mut q = p.clone();
            q.weight = Tensor::from_vec(ws, v.to_vec()).expect("finite");
            conv2d(&x, &q).expect("valid").into_vec()
        });
        let mut bv = p.bias.clone();
        check_vjp(&mut acc, &mut bv, &g.bias, proj.data(), |v| {
            let mut q = p.clone();
            q.bias = v.to_vec();
            conv2d(&x, &q).expect("valid").into_vec()
        });
    }
    Ok(acc.finish())
}

fn suite_relu(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("relu", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-relu", 0);
    let shape = Shape::new(1, 2, 5, 5);
    let x = Tensor::from_fn(shape, |_, _, _, _| {
        let m = r.random_range(0.01..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let proj = random_tensor(&mut r, shape);
    let g = relu_backward(&x, &proj)?;
    let mut xv = x.data().to_vec();
    check_vjp(&mut acc, &mut xv, g.data(), proj.data(), |v| {
        relu(&Tensor::from_vec(shape, v.to_vec()).expect("finite")).into_vec()
    });
    Ok(acc.finish())
}

fn suite_softmax_ce(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("softmax_ce", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-ce", 0);
    for trial in 0..20 {
        let n = 2 + trial % 5;
        let mut z: Vec<f64> = (0..n).map(|_| r.random_range(-4.0..4.0)).collect();
        let label = r.random_range(0..n);
        let (_, g) = softmax_cross_entropy(&z, label)?;
        for i in 0..n {
            let num = central(&mut z, i, |z| softmax_cross_entropy(z, label).expect("label in range").0);
            acc.compare(g[i], num);
        }
    }
    Ok(acc.finish())
}

fn suite_smooth_l1(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("smooth_l1", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-sl1", 0);
    for _ in 0..20 {
        let t = random_vec(&mut r, 4);
        let mut p: Vec<f64> = t
            .iter()
            .map(|&ti| {
                // stay clear of the |x| = 1 kink
                let d = r.random_range(0.05..0.9) * if r.random_bool(0.5) { 1.0 } else { 2.0 };
                ti + if r.random_bool(0.5) { d } else { -d }
            })
            .collect();
        let (_, g) = smooth_l1(&p, &t)?;
        for i in 0..4 {
            let num = central(&mut p, i, |p| smooth_l1(p, &t).expect("same length").0);
            acc.compare(g[i], num);
        }
    }
    Ok(acc.finish())
}

fn random_roi(r: &mut DetRng, img_w: f64, img_h: f64) -> RoI {
    let x1 = r.random_range(-4.0..img_w * 0.7);
    let y1 = r.random_range(-4.0..img_h * 0.7);
    let x2 = (x1 + r.random_range(2.0..img_w)).min(img_w + 4.0);
    let y2 = (y1 + r.random_range(2.0..img_h)).min(img_h + 4.0);
    RoI::new(0, x1, y1, x2, y2).expect("ordered corners")
}

fn suite_roi_pool(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("roi_pool", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-roipool", 0);
    for _ in 0..10 {
        let shape = Shape::new(1, 2, 6, 7);
        let f = spread_tensor(&mut r, shape);
        let roi = random_roi(&mut r, 28.0, 24.0);
        let k = r.random_range(1..=4);
        let (y, idx) = roi_pool_max(&f, &roi, k, k, 0.25)?;
        let proj = random_tensor(&mut r, y.shape());
        let g = roi_pool_max_backward(&idx, &proj, shape)?;
        let mut fv = f.data().to_vec();
        check_vjp(&mut acc, &mut fv, g.data(), proj.data(), |v| {
            let t = Tensor::from_vec(shape, v.to_vec()).expect("finite");
            roi_pool_max(&t, &roi, k, k, 0.25).expect("valid").0.into_vec()
        });
    }
    Ok(acc.finish())
}

fn suite_psroi(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("psroi", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-psroi", 0);
    for _ in 0..10 {
        let k = r.random_range(1..=3);
        let classes = r.random_range(1..=3);
        let shape = Shape::new(1, k * k * classes, 6, 7);
        let f = random_tensor(&mut r, shape);
        let roi = random_roi(&mut r, 28.0, 24.0);
        let pooled = psroi_pool_avg(&f, &roi, k, classes, 0.25)?;
        let proj = random_tensor(&mut r, pooled.values.shape());
        let g = psroi_pool_avg_backward(&pooled, &proj)?;
        let mut fv = f.data().to_vec();
        check_vjp(&mut acc, &mut fv, g.data(), proj.data(), |v| {
            let t = Tensor::from_vec(shape, v.to_vec()).expect("finite");
            psroi_pool_avg(&t, &roi, k, classes, 0.25).expect("valid").values.into_vec()
        });
    }
    Ok(acc.finish())
}

fn suite_normalize(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("normalize", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-normalize", 0);
    for mode in [Normalization::None, Normalization::L2, Normalization::LearnedScale] {
        for _ in 0..5 {
            let n = 5;
            let v = random_vec(&mut r, n);
            let scale = AffineScale {
                scale: (0..n).map(|_| r.random_range(0.5..2.0)).collect(),
                bias: random_vec(&mut r, n),
            };
            let s = (mode == Normalization::LearnedScale).then_some(&scale);
            let proj = random_vec(&mut r, n);
            let g = normalize_branch_backward(&v, mode, s, &proj)?;
            let mut vx = v.clone();
            check_vjp(&mut acc, &mut vx, &g.input, &proj, |x| {
                normalize_branch(x, mode, s).expect("valid")
            });
            if let Some(ga) = &g.affine {
                let mut sc = scale.scale.clone();
                check_vjp(&mut acc, &mut sc, &ga.scale, &proj, |x| {
                    let a = AffineScale {
                        scale: x.to_vec(),
                        bias: scale.bias.clone(),
                    };
                    normalize_branch(&v, mode, Some(&a)).expect("valid")
                });
                let mut b = scale.bias.clone();
                check_vjp(&mut acc, &mut b, &ga.bias, &proj, |x| {
                    let a = AffineScale {
                        scale: scale.scale.clone(),
                        bias: x.to_vec(),
                    };
                    normalize_branch(&v, mode, Some(&a)).expect("valid")
                });
            }
        }
    }
    Ok(acc.finish())
}

fn suite_couple(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("couple", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-couple", 0);
    for strategy in Strategy::ALL {
        for _ in 0..5 {
            let n = 5;
            let mut a = random_vec(&mut r, n);
            // keep the max strategy away from ties
            let mut b: Vec<f64> = a
                .iter()
                .map(|&x| x + r.random_range(0.05..1.0) * if r.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let proj = random_vec(&mut r, n);
            let (ga, gb) = couple_backward(&a, &b, strategy, &proj)?;
            let b0 = b.clone();
            check_vjp(&mut acc, &mut a, &ga, &proj, |x| couple(x, &b0, strategy).expect("same length"));
            let a0 = a.clone();
            check_vjp(&mut acc, &mut b, &gb, &proj, |x| couple(&a0, x, strategy).expect("same length"));
        }
    }
    Ok(acc.finish())
}

fn suite_context(opts: &GradcheckOptions) -> Result<SuiteReport> {
    use crate::context::{pool_with_context, pool_with_context_backward_into, ContextPair};
    let mut acc = Acc::new("context", OP_TOLERANCE, opts);
    let mut r = rng::stream(opts.seed, "gradcheck-context", 0);
    for _ in 0..5 {
        let shape = Shape::new(1, 2, 6, 7);
        let f = spread_tensor(&mut r, shape);
        let pair = ContextPair::new(random_roi(&mut r, 28.0, 24.0), 2.0, 28.0, 24.0)?;
        let (y, idx) = pool_with_context(&f, &pair, 3, 0.25)?;
        let proj = random_tensor(&mut r, y.shape());
        let mut g = Tensor::zeros(shape);
        pool_with_context_backward_into(&idx, &proj, &mut g)?;
        let mut fv = f.data().to_vec();
        check_vjp(&mut acc, &mut fv, g.data(), proj.data(), |v| {
            let t = Tensor::from_vec(shape, v.to_vec()).expect("finite");
            pool_with_context(&t, &pair, 3, 0.25).expect("valid").0.into_vec()
        });
    }
    Ok(acc.finish())
}

/// Micro-model used by the end-to-end check: 24x24 image, two RoIs, two classes, k = 3.
pub fn micro_model_config(coupling: CouplingConfig, context: bool) -> ModelConfig {
    ModelConfig {
        k: 3,
        num_classes: 2,
        reduce_dim: 4,
        hidden_dim: 5,
        backbone_channels: [2, 3, 4],
        context,
        coupling,
        ..ModelConfig::default()
    }
}

/// Training loss of `model` on a fixed micro-instance, and the pattern signature of
/// its forward pass.
fn micro_loss(model: &Model, image: &Tensor, rois: &[RoI], gts: &[(usize, BBox)]) -> Result<(f64, u64, Model)> {
    let targets = assign_targets(rois, gts, 0.5, (0.0, 0.5))?;
    let pass = model.forward(image, rois)?;
    let loss = multitask_loss(pass.outputs(), &targets, LossWeights::default())?;
    let grads = model.backward(&pass, &loss.grads)?;
    Ok((loss.total, pass.pattern_signature(), grads))
}

fn suite_model(opts: &GradcheckOptions) -> Result<SuiteReport> {
    let mut acc = Acc::new("model", COMPOSITE_TOLERANCE, opts);
    let variants = [
        (CouplingConfig::default(), false),
        (CouplingConfig::default(), true),
        (CouplingConfig::coupled(Normalization::L2, Strategy::Prod), false),
        (CouplingConfig::coupled(Normalization::None, Strategy::Max), false),
        (CouplingConfig::local_only(), false),
        (CouplingConfig::global_only(), true),
    ];
    for (vi, (coupling, context)) in variants.into_iter().enumerate() {
        let mut r = rng::stream(opts.seed, "gradcheck-model", vi as u64);
        let mut model = Model::new(micro_model_config(coupling, context), rng::derive_seed(opts.seed, "micro", vi as u64))?;
        // move learned scales off the identity so their gradients are generic
        for p in model.params_mut() {
            if p.name.starts_with("scale.") {
                for v in p.values.iter_mut() {
                    *v += r.random_range(-0.3..0.3);
                }
            }
        }
        let image = Tensor::from_fn(Shape::new(1, 1, 24, 24), |_, _, _, _| r.random_range(0.0..1.0));
        let gts = [(1, BBox::new(3.0, 4.0, 17.0, 19.0))];
        let rois = [
            RoI::new(0, 4.0, 3.0, 18.0, 18.0)?,
            RoI::new(0, 9.0, 10.0, 23.0, 22.0)?,
        ];
        let (_, base_sig, grads) = micro_loss(&model, &image, &rois, &gts)?;
        let n_entries = model.params().len();
        for e in 0..n_entries {
            let len = model.params()[e].values.len();
            for i in 0..len {
                let orig = model.params()[e].values[i];
                let eval_at = |v: f64, m: &mut Model| -> Result<(f64, u64)> {
                    m.params_mut()[e].values[i] = v;
                    let (l, s, _) = micro_loss(m, &image, &rois, &gts)?;
                    Ok((l, s))
                };
                let (up, s_up) = eval_at(orig + STEP, &mut model)?;
                let (down, s_down) = eval_at(orig - STEP, &mut model)?;
                model.params_mut()[e].values[i] = orig;
                if s_up != base_sig || s_down != base_sig {
                    acc.skipped += 1;
                    continue;
                }
                acc.compare(grads.params()[e].values[i], (up - down) / (2.0 * STEP));
            }
        }
    }
    Ok(acc.finish())
}

/// Runs every suite selected by `opts.scope`, in [`SUITES`] order.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<SuiteReport>> {
    let selected: Vec<&str> = SUITES
        .iter()
        .copied()
        .filter(|s| opts.scope.as_deref().is_none_or(|scope| scope.is_empty() || s.contains(scope)))
        .collect();
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "scope {:?} matches no suite (available: {})",
            opts.scope.as_deref().unwrap_or(""),
            SUITES.join(", ")
        )));
    }
    selected
        .into_iter()
        .map(|name| match name {
            "conv2d" => suite_conv(opts),
            "relu" => suite_relu(opts),
            "softmax_ce" => suite_softmax_ce(opts),
            "smooth_l1" => suite_smooth_l1(opts),
            "roi_pool" => suite_roi_pool(opts),
            "psroi" => suite_psroi(opts),
            "normalize" => suite_normalize(opts),
            "couple" => suite_couple(opts),
            "context" => suite_context(opts),
            "model" => suite_model(opts),
            other => unreachable!("suite {other} listed but not dispatched"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_uses_floor() {
        assert_eq!(rel_error(1.0, 1.0, 1e-6), 0.0);
        assert!(rel_error(1e-12, 2e-12, 1e-6) <= 1e-6);
        assert!(rel_error(1.0, 1.1, 1e-6) > 0.09);
    }

    #[test]
    fn unknown_scope_is_an_error() {
        let opts = GradcheckOptions {
            scope: Some("nope".into()),
            ..Default::default()
        };
        assert!(run_gradcheck(&opts).is_err());
    }
}
