use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Extents of a 4-D tensor in (batch, channel, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major 4-D array of `f64`, width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Wraps `data`, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "Tensor::from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Tensor::from_vec at offset {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for h in 0..shape.h {
                    for w in 0..shape.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for parameter updates; callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let o = self.offset(n, c, h, w);
        self.data[o] = v;
    }

    /// One `(h, w)` plane as a slice.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(
                "Tensor::add_assign",
                format!("{} vs {}", self.shape, other.shape),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Same data with a new shape of equal element count.
    pub fn reshape(self, shape: Shape) -> Result<Tensor> {
        if shape.numel() != self.shape.numel() {
            return Err(shape_err(
                "Tensor::reshape",
                format!("{} -> {shape}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?
            .shape;
        for p in parts {
            let s = p.shape;
            if s.n != first.n || s.h != first.h || s.w != first.w {
                return Err(shape_err(
                    "Tensor::concat_channels",
                    format!("{s} vs {first}"),
                ));
            }
        }
        let c_total = parts.iter().map(|p| p.shape.c).sum();
        let shape = Shape::new(first.n, c_total, first.h, first.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for p in parts {
                let chunk = p.shape.c * p.shape.plane();
                data.extend_from_slice(&p.data[n * chunk..(n + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Splits along channels at `at`, inverse of [`Tensor::concat_channels`] for two parts.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor, Tensor)> {
        let s = self.shape;
        if at > s.c {
            return Err(shape_err(
                "Tensor::split_channels",
                format!("split at {at} of {} channels", s.c),
            ));
        }
        let plane = s.plane();
        let mut a = Vec::with_capacity(s.n * at * plane);
        let mut b = Vec::with_capacity(s.n * (s.c - at) * plane);
        for n in 0..s.n {
            let base = n * s.c * plane;
            a.extend_from_slice(&self.data[base..base + at * plane]);
            b.extend_from_slice(&self.data[base + at * plane..base + s.c * plane]);
        }
        Ok((
            Tensor {
                shape: Shape::new(s.n, at, s.h, s.w),
                data: a,
            },
            Tensor {
                shape: Shape::new(s.n, s.c - at, s.h, s.w),
                data: b,
            },
        ))
    }

    /// Stacks single-item tensors of identical shape into one batch.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            if Shape::new(0, t.shape.c, t.shape.h, t.shape.w)
                != Shape::new(0, first.c, first.h, first.w)
            {
                return Err(shape_err(
                    "Tensor::stack_batch",
                    format!("{} vs {first}", t.shape),
                ));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, first.c, first.h, first.w),
            data,
        })
    }

    /// Extracts batch item `n` as a batch-of-one tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let chunk = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * chunk..(n + 1) * chunk].to_vec(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
