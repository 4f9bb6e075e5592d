//! Dense kernels with hand-written backward passes.
//!
//! Convolution follows cross-correlation semantics (the kernel is not flipped).

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Shape, Tensor};

/// Weights and geometry of one 2-D convolution layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// (out-channels, in-channels, kh, kw)
    pub weight: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        if bias.len() != weight.shape().n {
            return Err(shape_err(
                "ConvParams::new",
                format!("{} biases for {} output channels", bias.len(), weight.shape().n),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be >= 1".into()));
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize, stride: usize, padding: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(Shape::new(out_c, in_c, kh, kw)),
            bias: vec![0.0; out_c],
            stride: stride.max(1),
            padding,
        }
    }

    /// Uniform init with standard deviation `1/sqrt(fan_in)`, zero bias.
    pub fn uniform_init<R: Rng + ?Sized>(
        rng: &mut R,
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let mut p = Self::zeros(out_c, in_c, kh, kw, stride, padding);
        let bound = (3.0 / (in_c * kh * kw) as f64).sqrt();
        for v in p.weight.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape().h, self.weight.shape().w)
    }

    /// Output spatial extent for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(shape_err(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn check_input(&self, input: Shape) -> Result<(usize, usize)> {
        if input.c != self.in_channels() {
            return Err(shape_err(
                "conv2d",
                format!(
                    "input has {} channels but weight expects {} (weight {})",
                    input.c,
                    self.in_channels(),
                    self.weight.shape()
                ),
            ));
        }
        self.output_hw(input.h, input.w)
    }
}

/// Gradients of a convolution with respect to its three argument groups.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

/// Valid output index range `[lo, hi)` along one axis for kernel tap `k`.
#[inline]
fn tap_range(k: usize, pad: usize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    // input index = o * stride + k - pad must lie in [0, in_len)
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let s = input.shape();
    let (oh, ow) = params.check_input(s)?;
    let (kh, kw) = params.kernel();
    let out_c = params.out_channels();
    let stride = params.stride;
    let pad = params.padding;
    let mut out = Tensor::zeros(Shape::new(s.n, out_c, oh, ow));
    let wt = params.weight.data();
    let x = input.data();
    if is_dense(params, s) {
        // kernel covers the whole input: one dot product per (n, o)
        let len = s.c * s.h * s.w;
        let y = out.data_mut();
        for n in 0..s.n {
            let xs = &x[n * len..(n + 1) * len];
            for o in 0..out_c {
                let ws = &wt[o * len..(o + 1) * len];
                y[n * out_c + o] = ws.iter().zip(xs).fold(params.bias[o], |acc, (w, v)| acc + w * v);
            }
        }
        return Ok(out);
    }
    let out_plane = oh * ow;
    let in_plane = s.h * s.w;
    let y = out.data_mut();
    for n in 0..s.n {
        for o in 0..out_c {
            let ybase = (n * out_c + o) * out_plane;
            y[ybase..ybase + out_plane].fill(params.bias[o]);
            for i in 0..s.c {
                let xbase = (n * s.c + i) * in_plane;
                for a in 0..kh {
                    let (r0, r1) = tap_range(a, pad, stride, s.h, oh);
                    for b in 0..kw {
                        let wv = wt[((o * s.c + i) * kh + a) * kw + b];
                        if wv == 0.0 {
                            continue;
                        }
                        let (c0, c1) = tap_range(b, pad, stride, s.w, ow);
                        for r in r0..r1 {
                            let ih = r * stride + a - pad;
                            let yrow = &mut y[ybase + r * ow..ybase + (r + 1) * ow];
                            let xrow = &x[xbase + ih * s.w..xbase + (ih + 1) * s.w];
                            if stride == 1 {
                                let off = c0 + b - pad;
                                for (yv, xv) in yrow[c0..c1].iter_mut().zip(&xrow[off..off + c1 - c0]) {
                                    *yv += wv * xv;
                                }
                            } else {
                                for c in c0..c1 {
                                    yrow[c] += wv * xrow[c * stride + b - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn is_dense(params: &ConvParams, s: Shape) -> bool {
    params.padding == 0 && params.kernel() == (s.h, s.w)
}

/// Vector-Jacobian products of [`conv2d`] for input, weight and bias.
pub fn conv2d_backward(input: &Tensor, params: &ConvParams, upstream: &Tensor) -> Result<ConvGrads> {
    let s = input.shape();
    let (oh, ow) = params.check_input(s)?;
    let out_c = params.out_channels();
    let expected = Shape::new(s.n, out_c, oh, ow);
    if upstream.shape() != expected {
        return Err(shape_err(
            "conv2d_backward",
            format!("upstream gradient {} but output is {expected}", upstream.shape()),
        ));
    }
    let (kh, kw) = params.kernel();
    let stride = params.stride;
    let pad = params.padding;
    let mut gin = Tensor::zeros(s);
    let mut gw = Tensor::zeros(params.weight.shape());
    let mut gb = vec![0.0; out_c];
    let wt = params.weight.data();
    let x = input.data();
    let g = upstream.data();
    let out_plane = oh * ow;
    let in_plane = s.h * s.w;
    if is_dense(params, s) {
        let len = s.c * in_plane;
        let gx = gin.data_mut();
        let gwd = gw.data_mut();
        for n in 0..s.n {
            let xs = &x[n * len..(n + 1) * len];
            let gxs = &mut gx[n * len..(n + 1) * len];
            for o in 0..out_c {
                let gv = g[n * out_c + o];
                gb[o] += gv;
                if gv == 0.0 {
                    continue;
                }
                let ws = &wt[o * len..(o + 1) * len];
                let gws = &mut gwd[o * len..(o + 1) * len];
                for (((gwv, xv), gxv), wv) in gws.iter_mut().zip(xs).zip(gxs.iter_mut()).zip(ws) {
                    *gwv += gv * xv;
                    *gxv += gv * wv;
                }
            }
        }
        return Ok(ConvGrads {
            input: gin,
            weight: gw,
            bias: gb,
        });
    }
    {
        let gx = gin.data_mut();
        let gwd = gw.data_mut();
        for n in 0..s.n {
            for o in 0..out_c {
                let gbase = (n * out_c + o) * out_plane;
                let gplane = &g[gbase..gbase + out_plane];
                gb[o] += gplane.iter().sum::<f64>();
                for i in 0..s.c {
                    let xbase = (n * s.c + i) * in_plane;
                    for a in 0..kh {
                        let (r0, r1) = tap_range(a, pad, stride, s.h, oh);
                        for b in 0..kw {
                            let widx = ((o * s.c + i) * kh + a) * kw + b;
                            let wv = wt[widx];
                            let (c0, c1) = tap_range(b, pad, stride, s.w, ow);
                            let mut acc = 0.0;
                            for r in r0..r1 {
                                let ih = r * stride + a - pad;
                                let grow = &gplane[r * ow..(r + 1) * ow];
                                let xrow_start = xbase + ih * s.w;
                                if stride == 1 {
                                    let off = c0 + b - pad;
                                    let xrow = &x[xrow_start + off..xrow_start + off + c1 - c0];
                                    let gxrow = &mut gx[xrow_start + off..xrow_start + off + c1 - c0];
                                    for ((gv, xv), gxv) in grow[c0..c1].iter().zip(xrow).zip(gxrow) {
                                        acc += gv * xv;
                                        *gxv += gv * wv;
                                    }
                                } else {
                                    for c in c0..c1 {
                                        let xi = xrow_start + c * stride + b - pad;
                                        acc += grow[c] * x[xi];
                                        gx[xi] += grow[c] * wv;
                                    }
                                }
                            }
                            gwd[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes the cotangent where `input > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if input.shape() != upstream.shape() {
        return Err(shape_err(
            "relu_backward",
            format!("{} vs {}", input.shape(), upstream.shape()),
        ));
    }
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Negative log-likelihood of `label` under `softmax(logits)` and its gradient.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&z| (z - m).exp()).sum();
    let loss = total.ln() - (logits[label] - m);
    let mut grad: Vec<f64> = logits.iter().map(|&z| (z - m).exp() / total).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Summed smooth-L1 (Huber with unit threshold) of `pred - target`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(shape_err(
            "smooth_l1",
            format!("{} predictions vs {} targets", pred.len(), target.len()),
        ));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let x = p - t;
            if x.abs() < 1.0 {
                loss += 0.5 * x * x;
                x
            } else {
                loss += x.abs() - 0.5;
                x.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}
