//! Turning raw HU data into normalized, fixed-size training slices.
//!
//! The canonical image path is [`clip_hu`] to `[-1000, 1500]`, then
//! [`minmax_normalize`], then [`resize_bilinear`] to the model size. Masks go
//! through [`binarize_mask`] and [`resize_nearest_mask`].

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{MaskSlice, Slice2D};
use crate::math::{ceil, floor, round, sqrt};
use crate::nifti::{NiftiError, Volume, VolumeMeta};

/// Lower HU bound of the canonical clipping window (air).
pub const HU_CLIP_LO: f32 = -1000.0;
/// Upper HU bound of the canonical clipping window (dense bone).
pub const HU_CLIP_HI: f32 = 1500.0;
/// Model input edge length.
pub const MODEL_SIZE: usize = 128;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocessError {
    #[error("invalid range [{lo}, {hi}) with bin width {bin_width}")]
    BadRange { lo: f64, hi: f64, bin_width: f64 },
    #[error("target spacing must be positive and finite")]
    BadSpacing,
    #[error(transparent)]
    Volume(#[from] NiftiError),
}

/// Fixed-width histogram over `[lo, hi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bin_width: f64) -> Result<Self, PreprocessError> {
        if !(lo < hi && bin_width > 0.0 && lo.is_finite() && hi.is_finite() && bin_width.is_finite()) {
            return Err(PreprocessError::BadRange { lo, hi, bin_width });
        }
        let bins = ceil((hi - lo) / bin_width) as usize;
        Ok(Self { lo, hi, bin_width, counts: vec![0; bins.max(1)] })
    }

    /// Count `x` if it lies in `[lo, hi)`; returns whether it was counted.
    pub fn add(&mut self, x: f64) -> bool {
        if !(x >= self.lo && x < self.hi) {
            return false;
        }
        let bin = (floor((x - self.lo) / self.bin_width) as usize).min(self.counts.len() - 1);
        self.counts[bin] += 1;
        true
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `(bin_lo, bin_hi)` of bin `i`; the last bin is capped at `hi`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let lo = self.lo + i as f64 * self.bin_width;
        (lo, (lo + self.bin_width).min(self.hi))
    }
}

pub fn hu_histogram(v: &Volume, lo: f64, hi: f64, bin_width: f64) -> Result<Histogram, PreprocessError> {
    let mut h = Histogram::new(lo, hi, bin_width)?;
    for &x in v.voxels() {
        h.add(x as f64);
    }
    Ok(h)
}

pub fn clip_hu(s: &Slice2D, lo: f32, hi: f32) -> Result<Slice2D, PreprocessError> {
    if !(lo < hi) {
        return Err(PreprocessError::BadRange { lo: lo as f64, hi: hi as f64, bin_width: 0.0 });
    }
    Ok(s.map(|p| p.clamp(lo, hi)))
}

/// Scale to `[0, 1]`; a constant slice maps to all zeros.
pub fn minmax_normalize(s: &Slice2D) -> Slice2D {
    let (lo, hi) = s.min_max();
    if hi <= lo {
        return s.map(|_| 0.0);
    }
    let range = hi as f64 - lo as f64;
    s.map(|p| (((p as f64 - lo as f64) / range) as f32).clamp(0.0, 1.0))
}

/// Standardize with the population standard deviation; constant slices map to zeros.
pub fn zscore_normalize(s: &Slice2D) -> Slice2D {
    let n = s.pixels().len() as f64;
    let mean = s.mean();
    let var = s.pixels().iter().map(|&p| (p as f64 - mean) * (p as f64 - mean)).sum::<f64>() / n;
    let std = sqrt(var);
    if std == 0.0 {
        return s.map(|_| 0.0);
    }
    s.map(|p| ((p as f64 - mean) / std) as f32)
}

/// Source coordinate for output index `i` under pixel-center alignment.
#[inline]
pub(crate) fn center_aligned(i: usize, in_len: usize, out_len: usize) -> f64 {
    let scale = in_len as f64 / out_len as f64;
    ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64)
}

#[inline]
fn lerp_taps(coord: f64, len: usize) -> (usize, usize, f64) {
    let i0 = floor(coord) as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, coord - i0 as f64)
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(s: &Slice2D, ow: usize, oh: usize) -> Slice2D {
    assert!(ow > 0 && oh > 0, "target size must be positive");
    let (w, h) = s.dims();
    let xs: Vec<_> = (0..ow).map(|i| lerp_taps(center_aligned(i, w, ow), w)).collect();
    let mut out = Vec::with_capacity(ow * oh);
    for j in 0..oh {
        let (y0, y1, fy) = lerp_taps(center_aligned(j, h, oh), h);
        for &(x0, x1, fx) in &xs {
            let top = s.get(x0, y0) as f64 * (1.0 - fx) + s.get(x1, y0) as f64 * fx;
            let bottom = s.get(x0, y1) as f64 * (1.0 - fx) + s.get(x1, y1) as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Slice2D::from_raw(ow, oh, out)
}

#[inline]
pub(crate) fn nearest_index(i: usize, in_len: usize, out_len: usize) -> usize {
    // floor((i + 0.5) * in / out) in exact integer arithmetic
    (((2 * i + 1) * in_len) / (2 * out_len)).min(in_len - 1)
}

/// Nearest-neighbor resize; the output is binary by construction.
pub fn resize_nearest_mask(m: &MaskSlice, ow: usize, oh: usize) -> MaskSlice {
    assert!(ow > 0 && oh > 0, "target size must be positive");
    let (w, h) = m.dims();
    let xs: Vec<_> = (0..ow).map(|i| nearest_index(i, w, ow)).collect();
    let mut out = Vec::with_capacity(ow * oh);
    for j in 0..oh {
        let row = nearest_index(j, h, oh) * w;
        out.extend(xs.iter().map(|&x| m.pixels()[row + x]));
    }
    MaskSlice::from_raw(ow, oh, out)
}

/// 1 where the value is strictly greater than `thr`.
pub fn binarize_mask(s: &Slice2D, thr: f32) -> MaskSlice {
    let (w, h) = s.dims();
    MaskSlice::from_raw(w, h, s.pixels().iter().map(|&p| (p > thr) as u8).collect())
}

/// Trilinear resampling onto the grid implied by `target` spacing.
pub fn resample_volume(v: &Volume, target: (f32, f32, f32)) -> Result<Volume, PreprocessError> {
    let ok = |s: f32| s.is_finite() && s > 0.0;
    if !(ok(target.0) && ok(target.1) && ok(target.2)) {
        return Err(PreprocessError::BadSpacing);
    }
    let (nx, ny, nz) = v.dims();
    let (sx, sy, sz) = v.spacing();
    let out_len = |n: usize, s: f32, t: f32| (round(n as f64 * s as f64 / t as f64) as usize).max(1);
    let (ox, oy, oz) = (out_len(nx, sx, target.0), out_len(ny, sy, target.1), out_len(nz, sz, target.2));

    let xs: Vec<_> = (0..ox).map(|i| lerp_taps(center_aligned(i, nx, ox), nx)).collect();
    let ys: Vec<_> = (0..oy).map(|i| lerp_taps(center_aligned(i, ny, oy), ny)).collect();
    let mut out = Vec::with_capacity(ox * oy * oz);
    for k in 0..oz {
        let (z0, z1, fz) = lerp_taps(center_aligned(k, nz, oz), nz);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let plane = |z: usize| {
                    let a = v.get(x0, y0, z) as f64 * (1.0 - fx) + v.get(x1, y0, z) as f64 * fx;
                    let b = v.get(x0, y1, z) as f64 * (1.0 - fx) + v.get(x1, y1, z) as f64 * fx;
                    a * (1.0 - fy) + b * fy
                };
                out.push((plane(z0) * (1.0 - fz) + plane(z1) * fz) as f32);
            }
        }
    }
    let meta = VolumeMeta::new((ox, oy, oz), target);
    Ok(Volume::new(meta, out)?)
}

/// The canonical image path: clip, bilinear resize to `(width, height)`,
/// min-max normalize.
///
/// Normalizing last makes every non-constant output span exactly `[0, 1]`,
/// so the path is idempotent.
pub fn prepare_image(s: &Slice2D, size: (usize, usize)) -> Slice2D {
    let clipped = clip_hu(s, HU_CLIP_LO, HU_CLIP_HI).expect("canonical window is ordered");
    minmax_normalize(&resize_bilinear(&clipped, size.0, size.1))
}

/// The canonical mask path: binarize at 0.5, nearest resize.
pub fn prepare_mask(s: &Slice2D, size: (usize, usize)) -> MaskSlice {
    resize_nearest_mask(&binarize_mask(s, 0.5), size.0, size.1)
}
