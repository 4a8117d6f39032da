use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use super::AutodiffError;

/// `(N, C, H, W)` extents of a dense tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// A length-`c` vector laid out as `(1, c, 1, 1)`; used for biases.
    pub const fn vector(c: usize) -> Self {
        Self { n: 1, c, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }

    /// Per-sample element count `C·H·W`.
    pub const fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    /// True when every dimension of `self` equals the corresponding one of
    /// `target` or is 1.
    pub fn broadcasts_to(&self, target: &Shape) -> bool {
        self.dims().iter().zip(target.dims()).all(|(&a, b)| a == b || a == 1)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major `f32` tensor value.
///
/// Gradient bookkeeping (`requires_grad`, the gradient buffer) lives on the
/// [`Tape`](super::Tape) node that owns a tensor, not on the value itself.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("len", &self.data.len()).finish()
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, AutodiffError> {
        if shape.len() != data.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "tensor",
                detail: alloc::format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: Shape::SCALAR, data: vec![value] }
    }

    pub fn from_fn(shape: Shape, f: impl FnMut(usize) -> f32) -> Self {
        Self { shape, data: (0..shape.len()).map(f).collect() }
    }

    pub(crate) fn from_raw(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: Shape) -> Result<Self, AutodiffError> {
        Tensor::new(shape, self.data)
    }

    /// Sample `n` as a `(1, C, H, W)` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let len = self.shape.sample_len();
        Tensor::from_raw(
            Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            self.data[n * len..(n + 1) * len].to_vec(),
        )
    }
}
