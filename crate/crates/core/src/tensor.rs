//! Dense four-dimensional `f64` arrays in NCHW layout.
//!
//! Everything in the pipeline is stored this way: images are `[n, 3, h, w]`,
//! depth and disparity maps `[n, 1, h, w]`, matrices `[n, 1, rows, cols]` and
//! scalars `[1, 1, 1, 1]`.

use std::fmt;

use crate::error::{Error, Result};

/// Shape of a [`Tensor`] as `[batch, channels, height, width]`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const SCALAR: Shape = Shape([1, 1, 1, 1]);

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.0[1] * self.0[2] * self.0[3]
    }

    /// Spatial positions per channel plane.
    pub fn plane_len(&self) -> usize {
        self.0[2] * self.0[3]
    }

    /// Row-major strides with zero stride on broadcast (size-1) axes of `self`
    /// relative to `target`.
    fn broadcast_strides(&self, target: &Shape) -> [usize; 4] {
        let dims = self.0;
        let full = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];
        let mut out = [0; 4];
        for axis in 0..4 {
            out[axis] = if dims[axis] == 1 && target.0[axis] != 1 {
                0
            } else {
                full[axis]
            };
        }
        out
    }

    /// Shape obtained by broadcasting `self` against `other`, if compatible.
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0; 4];
        for axis in 0..4 {
            let (a, b) = (self.0[axis], other.0[axis]);
            out[axis] = if a == b {
                a
            } else if a == 1 {
                b
            } else if b == 1 {
                a
            } else {
                return None;
            };
        }
        Some(Shape(out))
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[..{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape} needs {} values, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::SCALAR, value)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [n, c, h, w] = shape.0;
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(b, ch, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> [usize; 4] {
        self.shape.0
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + y) * ws + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = value;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Elementwise combination with numpy-style broadcasting over size-1 axes.
    pub fn broadcast_map(
        &self,
        other: &Tensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            return Ok(self.zip_map(other, f));
        }
        let out_shape = self.shape.broadcast(&other.shape).ok_or_else(|| {
            Error::invalid(format!(
                "shapes {} and {} do not broadcast",
                self.shape, other.shape
            ))
        })?;
        let sa = self.shape.broadcast_strides(&out_shape);
        let sb = other.shape.broadcast_strides(&out_shape);
        let [n, c, h, w] = out_shape.0;
        let mut data = Vec::with_capacity(out_shape.numel());
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                    let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                    for i3 in 0..w {
                        data.push(f(
                            self.data[base_a + i3 * sa[3]],
                            other.data[base_b + i3 * sb[3]],
                        ));
                    }
                }
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
        })
    }

    /// Sums `self` over the axes where `target` has size 1. Used to fold a
    /// broadcast gradient back onto its operand.
    pub fn reduce_to(&self, target: Shape) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let strides = target.broadcast_strides(&self.shape);
        let mut out = Tensor::zeros(target);
        let [n, c, h, w] = self.shape.0;
        let mut i = 0;
        for i0 in 0..n {
            for i1 in 0..c {
                for i2 in 0..h {
                    let base = i0 * strides[0] + i1 * strides[1] + i2 * strides[2];
                    for i3 in 0..w {
                        out.data[base + i3 * strides[3]] += self.data[i];
                        i += 1;
                    }
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Batch item `n` as a standalone `[1, c, h, w]` tensor.
    pub fn item_at(&self, n: usize) -> Tensor {
        let len = self.shape.item_len();
        let [_, c, h, w] = self.shape.0;
        Tensor {
            shape: Shape::new(1, c, h, w),
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Stacks same-shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::invalid(format!(
                    "cannot stack {} with {}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, c, h, w),
            data,
        })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate zero tensors"))?;
        let [n, _, h, w] = first.shape.0;
        let mut c_total = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape.0;
            if (tn, th, tw) != (n, h, w) {
                return Err(Error::invalid(format!(
                    "cannot concatenate {} with {}",
                    t.shape, first.shape
                )));
            }
            c_total += tc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for t in items {
                let len = t.shape.item_len();
                data.extend_from_slice(&t.data[b * len..(b + 1) * len]);
            }
        }
        debug_assert_eq!(data.len(), n * c_total * plane);
        Ok(Tensor {
            shape: Shape::new(n, c_total, h, w),
            data,
        })
    }

    /// Channels `start..start + len` of every batch item.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Tensor {
        let [n, c, h, w] = self.shape.0;
        assert!(start + len <= c, "channel range out of bounds");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor {
            shape: Shape::new(n, len, h, w),
            data,
        }
    }

    /// Mirrors every plane left to right.
    pub fn flip_horizontal(&self) -> Tensor {
        let [_, _, _, w] = self.shape.0;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }
}
