//! Seeded, label-consistent augmentation of slice pairs.
//!
//! Geometric transforms (affine, elastic) move image and mask through the
//! same coordinate map: bilinear for the image, nearest for the mask, zero
//! outside the source. Photometric transforms (blur, brightness/contrast)
//! touch the image only. Each item draws from its own ChaCha8 stream keyed
//! by `(seed, index)`, so any subset can be regenerated independently.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::{MaskSlice, Slice2D, SlicePair};
use crate::math::{ceil, cos, exp, floor, sin};
use crate::preprocess::{resize_bilinear, resize_nearest_mask, MODEL_SIZE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("scale must be positive, got {0}")]
    BadScale(f64),
    #[error("contrast gain must be positive, got {0}")]
    BadGain(f32),
    #[error("image is {0:?} but mask is {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("no input pairs")]
    EmptyInput,
    #[error("target count {target} is below the {have} input pairs")]
    BadTarget { target: usize, have: usize },
    #[error("invalid augmentation configuration: {0}")]
    BadConfig(String),
}

/// Probability of applying each transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformProbs {
    pub rotate: f64,
    pub translate: f64,
    pub scale: f64,
    pub elastic: f64,
    pub blur: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl TransformProbs {
    pub const NEVER: Self = Self::all(0.0);
    pub const ALWAYS: Self = Self::all(1.0);

    pub const fn all(p: f64) -> Self {
        Self { rotate: p, translate: p, scale: p, elastic: p, blur: p, brightness: p, contrast: p }
    }

    fn as_array(&self) -> [(&'static str, f64); 7] {
        [
            ("rotate", self.rotate),
            ("translate", self.translate),
            ("scale", self.scale),
            ("elastic", self.elastic),
            ("blur", self.blur),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
        ]
    }
}

impl Default for TransformProbs {
    fn default() -> Self {
        Self::all(0.5)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub rot_max_deg: f64,
    /// Maximum shift as a fraction of the slice width/height.
    pub translate_max_frac: f64,
    pub scale_range: (f64, f64),
    /// Peak displacement of the elastic field in pixels.
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub blur_sigma_range: (f64, f64),
    pub brightness_delta_max: f32,
    pub contrast_range: (f32, f32),
    pub probs: TransformProbs,
    /// Size of every slice produced by [`build_augmented_dataset`].
    pub output_size: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rot_max_deg: 5.0,
            translate_max_frac: 0.05,
            scale_range: (0.95, 1.05),
            elastic_alpha: 2.0,
            elastic_sigma: 8.0,
            blur_sigma_range: (0.0, 1.5),
            brightness_delta_max: 0.1,
            contrast_range: (0.9, 1.1),
            probs: TransformProbs::default(),
            output_size: (MODEL_SIZE, MODEL_SIZE),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |s: String| Err(AugmentError::BadConfig(s));
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !(self.rot_max_deg >= 0.0 && self.rot_max_deg.is_finite()) {
            return bad(format!("rot_max_deg must be non-negative, got {}", self.rot_max_deg));
        }
        if !(self.translate_max_frac >= 0.0 && self.translate_max_frac < 1.0) {
            return bad(format!("translate_max_frac must lie in [0, 1), got {}", self.translate_max_frac));
        }
        if !ordered(self.scale_range) || self.scale_range.0 <= 0.0 {
            return bad(format!("scale_range must be positive and ordered, got {:?}", self.scale_range));
        }
        if !(self.elastic_alpha >= 0.0 && self.elastic_sigma > 0.0) {
            return bad(format!("need elastic_alpha >= 0 and elastic_sigma > 0"));
        }
        if !ordered(self.blur_sigma_range) || self.blur_sigma_range.0 < 0.0 {
            return bad(format!("blur_sigma_range must be non-negative and ordered, got {:?}", self.blur_sigma_range));
        }
        if !(self.brightness_delta_max >= 0.0) {
            return bad(format!("brightness_delta_max must be non-negative"));
        }
        let (clo, chi) = self.contrast_range;
        if !ordered((clo as f64, chi as f64)) || clo <= 0.0 {
            return bad(format!("contrast_range must be positive and ordered, got {:?}", self.contrast_range));
        }
        for (name, p) in self.probs.as_array() {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability for {name} must lie in [0, 1], got {p}"));
            }
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return bad(format!("output_size must be positive"));
        }
        Ok(())
    }
}

/// Bilinear sample with zero outside the image.
fn sample_bilinear(s: &Slice2D, x: f64, y: f64) -> f32 {
    let (w, h) = (s.width() as i64, s.height() as i64);
    let (x0, y0) = (floor(x), floor(y));
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            s.get(xi as usize, yi as usize) as f64
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn sample_nearest(m: &MaskSlice, x: f64, y: f64) -> u8 {
    let (xi, yi) = (floor(x + 0.5), floor(y + 0.5));
    if xi < 0.0 || yi < 0.0 || xi >= m.width() as f64 || yi >= m.height() as f64 {
        return 0;
    }
    m.get(xi as usize, yi as usize) as u8
}

/// Pull both planes through `source(x, y)`, the pre-image of output pixel `(x, y)`.
fn warp(s: &Slice2D, m: &MaskSlice, source: impl Fn(usize, usize) -> (f64, f64)) -> (Slice2D, MaskSlice) {
    let (w, h) = s.dims();
    let mut img = Vec::with_capacity(w * h);
    let mut msk = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = source(x, y);
            img.push(sample_bilinear(s, sx, sy));
            msk.push(sample_nearest(m, sx, sy));
        }
    }
    (Slice2D::from_raw(w, h, img), MaskSlice::from_raw(w, h, msk))
}

fn check_dims(s: &Slice2D, m: &MaskSlice) -> Result<(), AugmentError> {
    if s.dims() != m.dims() {
        return Err(AugmentError::DimMismatch(s.dims(), m.dims()));
    }
    Ok(())
}

/// Inverse of `p ↦ c + scale·R(rot)·(p − c) + t` with `c` the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    center: (f64, f64),
    cos: f64,
    sin: f64,
    inv_scale: f64,
    shift: (f64, f64),
}

impl AffineMap {
    pub fn new(dims: (usize, usize), rot_deg: f64, tx: f64, ty: f64, scale: f64) -> Result<Self, AugmentError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(AugmentError::BadScale(scale));
        }
        let theta = rot_deg.to_radians();
        Ok(Self {
            center: ((dims.0 as f64 - 1.0) / 2.0, (dims.1 as f64 - 1.0) / 2.0),
            cos: cos(theta),
            sin: sin(theta),
            inv_scale: 1.0 / scale,
            shift: (tx, ty),
        })
    }

    /// Source coordinate sampled for output pixel `(x, y)`.
    pub fn source(&self, x: f64, y: f64) -> (f64, f64) {
        let (cx, cy) = self.center;
        let (dx, dy) = (x - cx - self.shift.0, y - cy - self.shift.1);
        let u = (self.cos * dx + self.sin * dy) * self.inv_scale;
        let v = (-self.sin * dx + self.cos * dy) * self.inv_scale;
        (cx + u, cy + v)
    }
}

/// Rotation (degrees, about the centre), scaling and translation (pixels).
pub fn affine_transform(
    s: &Slice2D,
    m: &MaskSlice,
    rot_deg: f64,
    tx: f64,
    ty: f64,
    scale: f64,
) -> Result<(Slice2D, MaskSlice), AugmentError> {
    check_dims(s, m)?;
    let map = AffineMap::new(s.dims(), rot_deg, tx, ty, scale)?;
    Ok(warp(s, m, |x, y| map.source(x as f64, y as f64)))
}

/// Normalized 1D Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = ceil(3.0 * sigma) as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable blur of a row-major `w × h` field with edge replication.
fn blur_field(data: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, &kj)| kj * data[y * w + clamp(x as i64 + j as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, &kj)| kj * tmp[clamp(y as i64 + j as i64 - r, h) * w + x]).sum();
        }
    }
    out
}

/// Gaussian blur; `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(s: &Slice2D, sigma: f64) -> Slice2D {
    if sigma <= 0.0 {
        return s.clone();
    }
    let (w, h) = s.dims();
    let data: Vec<f64> = s.pixels().iter().map(|&p| p as f64).collect();
    Slice2D::from_raw(w, h, blur_field(&data, w, h, sigma).into_iter().map(|v| v as f32).collect())
}

/// Random smooth displacement: uniform noise in [-1, 1], blurred with `sigma`,
/// rescaled so the largest component magnitude is `alpha` pixels.
pub fn displacement_field(w: usize, h: usize, alpha: f64, sigma: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut channel = || {
        let noise: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..=1.0)).collect();
        blur_field(&noise, w, h, sigma)
    };
    let (dx, dy) = (channel(), channel());
    let peak = dx.iter().chain(&dy).fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { alpha / peak } else { 0.0 };
    (dx.into_iter().map(|v| v * gain).collect(), dy.into_iter().map(|v| v * gain).collect())
}

pub fn elastic_deform(s: &Slice2D, m: &MaskSlice, alpha: f64, sigma: f64, seed: u64) -> Result<(Slice2D, MaskSlice), AugmentError> {
    check_dims(s, m)?;
    if !(alpha >= 0.0 && sigma > 0.0) {
        return Err(AugmentError::BadConfig(format!("need alpha >= 0 and sigma > 0, got {alpha} and {sigma}")));
    }
    if alpha == 0.0 {
        return Ok((s.clone(), m.clone()));
    }
    let (w, h) = s.dims();
    let (dx, dy) = displacement_field(w, h, alpha, sigma, seed);
    Ok(warp(s, m, |x, y| (x as f64 + dx[y * w + x], y as f64 + dy[y * w + x])))
}

/// `clamp(gain·(x − mean) + mean + delta, 0, 1)` with the slice mean.
pub fn brightness_contrast(s: &Slice2D, delta: f32, gain: f32) -> Result<Slice2D, AugmentError> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(AugmentError::BadGain(gain));
    }
    let mean = s.mean() as f32;
    Ok(s.map(|x| (gain * (x - mean) + mean + delta).clamp(0.0, 1.0)))
}

/// Parameters drawn for one item; `None` means the transform is skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub rot_deg: Option<f64>,
    pub shift: Option<(f64, f64)>,
    pub scale: Option<f64>,
    pub elastic_seed: Option<u64>,
    pub blur_sigma: Option<f64>,
    pub brightness: Option<f32>,
    pub contrast: Option<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..=hi) }
}

/// Draw the parameters for item `index` of a `dims`-sized slice.
///
/// Every draw is made whether or not its transform fires, so changing one
/// probability never shifts the parameters of another transform.
pub fn sample_params(cfg: &AugmentConfig, index: u64, dims: (usize, usize)) -> AugmentParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let p = cfg.probs;
    let gate = |rng: &mut ChaCha8Rng, prob: f64| rng.random::<f64>() < prob;
    let rot = uniform(&mut rng, -cfg.rot_max_deg, cfg.rot_max_deg);
    let rot_on = gate(&mut rng, p.rotate);
    let (mx, my) = (cfg.translate_max_frac * dims.0 as f64, cfg.translate_max_frac * dims.1 as f64);
    let shift = (uniform(&mut rng, -mx, mx), uniform(&mut rng, -my, my));
    let shift_on = gate(&mut rng, p.translate);
    let scale = uniform(&mut rng, cfg.scale_range.0, cfg.scale_range.1);
    let scale_on = gate(&mut rng, p.scale);
    let elastic_seed: u64 = rng.random();
    let elastic_on = gate(&mut rng, p.elastic);
    let blur = uniform(&mut rng, cfg.blur_sigma_range.0, cfg.blur_sigma_range.1);
    let blur_on = gate(&mut rng, p.blur);
    let d = cfg.brightness_delta_max as f64;
    let delta = uniform(&mut rng, -d, d) as f32;
    let delta_on = gate(&mut rng, p.brightness);
    let gain = uniform(&mut rng, cfg.contrast_range.0 as f64, cfg.contrast_range.1 as f64) as f32;
    let gain_on = gate(&mut rng, p.contrast);
    AugmentParams {
        rot_deg: rot_on.then_some(rot),
        shift: shift_on.then_some(shift),
        scale: scale_on.then_some(scale),
        elastic_seed: elastic_on.then_some(elastic_seed),
        blur_sigma: blur_on.then_some(blur),
        brightness: delta_on.then_some(delta),
        contrast: gain_on.then_some(gain),
    }
}

/// Apply drawn parameters: affine, elastic, blur, then brightness/contrast.
pub fn apply_params(s: &Slice2D, m: &MaskSlice, params: &AugmentParams, cfg: &AugmentConfig) -> Result<(Slice2D, MaskSlice), AugmentError> {
    check_dims(s, m)?;
    let (mut s, mut m) = (s.clone(), m.clone());
    if params.rot_deg.is_some() || params.shift.is_some() || params.scale.is_some() {
        let (tx, ty) = params.shift.unwrap_or((0.0, 0.0));
        (s, m) = affine_transform(&s, &m, params.rot_deg.unwrap_or(0.0), tx, ty, params.scale.unwrap_or(1.0))?;
    }
    if let Some(seed) = params.elastic_seed {
        (s, m) = elastic_deform(&s, &m, cfg.elastic_alpha, cfg.elastic_sigma, seed)?;
    }
    if let Some(sigma) = params.blur_sigma {
        s = gaussian_blur(&s, sigma);
    }
    if params.brightness.is_some() || params.contrast.is_some() {
        s = brightness_contrast(&s, params.brightness.unwrap_or(0.0), params.contrast.unwrap_or(1.0))?;
    }
    Ok((s, m))
}

pub fn augment_pair(s: &Slice2D, m: &MaskSlice, cfg: &AugmentConfig, index: u64) -> Result<(Slice2D, MaskSlice), AugmentError> {
    check_dims(s, m)?;
    let params = sample_params(cfg, index, s.dims());
    apply_params(s, m, &params, cfg)
}

/// Resize a pair to `size` (bilinear image, nearest mask) unless it already matches.
pub fn fit_to_size(p: &SlicePair, size: (usize, usize)) -> SlicePair {
    if p.image.dims() == size && p.mask.dims() == size {
        return p.clone();
    }
    SlicePair::new(resize_bilinear(&p.image, size.0, size.1), resize_nearest_mask(&p.mask, size.0, size.1))
}

/// Augmented copy number `k` of a dataset whose originals are `fitted`
/// (already at the output size): item `k mod n`, stream `k`.
pub fn augmented_copy(fitted: &[SlicePair], cfg: &AugmentConfig, k: usize) -> Result<SlicePair, AugmentError> {
    if fitted.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    let src = &fitted[k % fitted.len()];
    let (s, m) = augment_pair(&src.image, &src.mask, cfg, k as u64)?;
    Ok(SlicePair::new(s, m))
}

/// The originals (resized to `cfg.output_size`) followed by round-robin
/// augmented copies, `target_count` pairs in total.
pub fn build_augmented_dataset(pairs: &[SlicePair], cfg: &AugmentConfig, target_count: usize) -> Result<Vec<SlicePair>, AugmentError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(AugmentError::EmptyInput);
    }
    if target_count < pairs.len() {
        return Err(AugmentError::BadTarget { target: target_count, have: pairs.len() });
    }
    for p in pairs {
        check_dims(&p.image, &p.mask)?;
    }
    let mut out: Vec<SlicePair> = pairs.iter().map(|p| fit_to_size(p, cfg.output_size)).collect();
    let n = out.len();
    for k in 0..target_count - n {
        let copy = augmented_copy(&out[..n], cfg, k)?;
        out.push(copy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_with_expected_radius() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(gaussian_kernel(0.4).len(), 5);
    }

    #[test]
    fn bad_inputs() {
        let s = Slice2D::filled(4, 4, 0.5);
        let m = MaskSlice::zeros(4, 4);
        assert_eq!(affine_transform(&s, &m, 0.0, 0.0, 0.0, 0.0), Err(AugmentError::BadScale(0.0)));
        assert_eq!(brightness_contrast(&s, 0.0, 0.0), Err(AugmentError::BadGain(0.0)));
        assert!(matches!(augment_pair(&s, &MaskSlice::zeros(3, 4), &AugmentConfig::default(), 0), Err(AugmentError::DimMismatch(..))));
    }
}
