//! 2D slice containers shared by every stage of the pipeline.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ImageError {
    #[error("slice dimensions must be positive, got {width}x{height}")]
    ZeroSize { width: usize, height: usize },
    #[error("expected {expected} pixels for the given dimensions, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("pixel {index} is not finite")]
    NonFinite { index: usize },
    #[error("mask pixel {index} has value {value}, expected 0 or 1")]
    NonBinary { index: usize, value: u8 },
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), ImageError> {
    if width == 0 || height == 0 {
        return Err(ImageError::ZeroSize { width, height });
    }
    if width * height != len {
        return Err(ImageError::LengthMismatch { expected: width * height, actual: len });
    }
    Ok(())
}

/// A row-major single-channel image of finite `f32` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2D {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Slice2D {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, ImageError> {
        check_dims(width, height, pixels.len())?;
        if let Some(index) = pixels.iter().position(|p| !p.is_finite()) {
            return Err(ImageError::NonFinite { index });
        }
        Ok(Self { width, height, pixels })
    }

    /// Panics on zero dimensions or a non-finite fill value.
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && value.is_finite());
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0);
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let v = f(x, y);
                assert!(v.is_finite(), "non-finite pixel at ({x}, {y})");
                pixels.push(v);
            }
        }
        Self { width, height, pixels }
    }

    /// Build without validation; callers guarantee the invariants.
    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<f32>) -> Self {
        debug_assert_eq!(width * height, pixels.len());
        debug_assert!(pixels.iter().all(|p| p.is_finite()));
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)))
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum::<f64>() / self.pixels.len() as f64
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_raw(self.width, self.height, self.pixels.iter().map(|&p| f(p)).collect())
    }
}

/// A row-major binary mask; every pixel is 0 (background) or 1 (foreground).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskSlice {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl MaskSlice {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(width, height, pixels.len())?;
        if let Some(index) = pixels.iter().position(|&p| p > 1) {
            return Err(ImageError::NonBinary { index, value: pixels[index] });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, pixels: vec![0; width * height] }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, pixels: vec![1; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0);
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y) as u8);
            }
        }
        Self { width, height, pixels }
    }

    pub(crate) fn from_raw(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        debug_assert_eq!(width * height, pixels.len());
        debug_assert!(pixels.iter().all(|&p| p <= 1));
        Self { width, height, pixels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = on as u8;
    }

    /// Foreground pixel count.
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn complement(&self) -> Self {
        Self::from_raw(self.width, self.height, self.pixels.iter().map(|&p| 1 - p).collect())
    }

    pub fn to_slice(&self) -> Slice2D {
        Slice2D::from_raw(self.width, self.height, self.pixels.iter().map(|&p| p as f32).collect())
    }
}

/// One image slice and its infection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub image: Slice2D,
    pub mask: MaskSlice,
}

impl SlicePair {
    pub fn new(image: Slice2D, mask: MaskSlice) -> Self {
        Self { image, mask }
    }

    pub fn same_dims(&self) -> bool {
        self.image.dims() == self.mask.dims()
    }
}
