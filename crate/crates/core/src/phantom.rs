//! Synthetic chest-CT-like volumes with known infection masks.
//!
//! An elliptic body of soft tissue with a bony rim surrounds two ellipsoidal
//! lungs. Smooth ellipsoidal lesions are placed inside the lungs; the mask is
//! exactly the set of lesion voxels. Gaussian noise is added to the image
//! only, which is then clamped to `[-1024, 1500]` HU.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::SlicePair;
use crate::math::{cos, sin};
use crate::nifti::{Volume, VolumeMeta};
use crate::preprocess::binarize_mask;

pub const AIR_HU: f32 = -1000.0;
pub const HU_FLOOR: f32 = -1024.0;
pub const HU_CEIL: f32 = 1500.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    pub spacing: (f32, f32, f32),
    pub lung_hu: f32,
    pub tissue_hu: f32,
    pub bone_hu: f32,
    pub infection_hu: f32,
    /// Inclusive lesion count range per volume.
    pub blob_count_range: (usize, usize),
    /// Lesion radius range in voxels.
    pub blob_radius_range: (f64, f64),
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: (128, 128, 16),
            spacing: (0.75, 0.75, 5.0),
            lung_hu: -750.0,
            tissue_hu: 40.0,
            bone_hu: 700.0,
            infection_hu: -100.0,
            blob_count_range: (1, 4),
            blob_radius_range: (3.0, 9.0),
            noise_sigma: 20.0,
            seed: 0,
        }
    }
}

/// Axis-aligned ellipsoid in voxel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: (f64, f64, f64),
    pub radii: (f64, f64, f64),
}

impl Ellipsoid {
    /// Squared normalized distance; `<= 1` inside.
    pub fn level(&self, x: f64, y: f64, z: f64) -> f64 {
        let (cx, cy, cz) = self.center;
        let (rx, ry, rz) = self.radii;
        ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) + ((z - cz) / rz).powi(2)
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.level(x, y, z) <= 1.0
    }
}

/// Body cross-section semi-axes and bone rim thickness, in voxels.
fn body_geometry(nx: usize, ny: usize) -> ((f64, f64), (f64, f64), f64) {
    let c = (nx as f64 / 2.0, ny as f64 / 2.0);
    let r = (0.46 * nx as f64, 0.40 * ny as f64);
    let rim = (0.035 * nx.min(ny) as f64).max(1.0);
    (c, r, rim)
}

impl PhantomConfig {
    /// The two lung ellipsoids implied by `dims`.
    pub fn lungs(&self) -> [Ellipsoid; 2] {
        let (nx, ny, nz) = self.dims;
        let (nx, ny, nz) = (nx as f64, ny as f64, nz as f64);
        let radii = (0.16 * nx, 0.27 * ny, 0.55 * nz);
        let at = |fx: f64| Ellipsoid { center: (fx * nx, 0.5 * ny, 0.5 * nz), radii };
        [at(0.31), at(0.69)]
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |s: String| Err(PhantomError::BadConfig(s));
        let (nx, ny, nz) = self.dims;
        if nx < 16 || ny < 16 || nz == 0 {
            return bad(format!("dims must be at least 16x16x1, got {nx}x{ny}x{nz}"));
        }
        for (name, v) in [("lung", self.lung_hu), ("tissue", self.tissue_hu), ("bone", self.bone_hu), ("infection", self.infection_hu)] {
            if !(-1000.0..=1500.0).contains(&v) {
                return bad(format!("{name}_hu {v} outside [-1000, 1500]"));
            }
        }
        let (lo, hi) = self.blob_count_range;
        if lo > hi {
            return bad(format!("blob_count_range ({lo}, {hi}) is not ordered"));
        }
        let (rlo, rhi) = self.blob_radius_range;
        let lung = self.lungs()[0].radii;
        let extent = lung.0.min(lung.1);
        if !(rlo > 0.0 && rlo <= rhi && rhi < extent) {
            return bad(format!("blob radii ({rlo}, {rhi}) must be positive, ordered and below the lung extent {extent:.2}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        let (sx, sy, sz) = self.spacing;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
            return bad(format!("spacing must be positive"));
        }
        Ok(())
    }
}

/// A lesion: ellipsoid rotated about z by `angle`.
#[derive(Debug, Clone, Copy)]
struct Blob {
    shape: Ellipsoid,
    angle: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let (cx, cy, _) = self.shape.center;
        let (c, s) = (cos(self.angle), sin(self.angle));
        let (dx, dy) = (x - cx, y - cy);
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        self.shape.contains(cx + u, cy + v, z)
    }
}

fn sample_blobs(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let lungs = cfg.lungs();
    let (clo, chi) = cfg.blob_count_range;
    let n = rng.random_range(clo..=chi);
    let (rlo, rhi) = cfg.blob_radius_range;
    (0..n)
        .map(|_| {
            let lung = lungs[rng.random_range(0..2)];
            let (cx, cy, cz) = lung.center;
            let (rx, ry, rz) = lung.radii;
            // centre well inside the lung so most of the lesion survives clipping
            let center = loop {
                let p = (
                    cx + rx * rng.random_range(-1.0..1.0),
                    cy + ry * rng.random_range(-1.0..1.0),
                    cz + rz * rng.random_range(-1.0..1.0),
                );
                if lung.level(p.0, p.1, p.2) <= 0.5 {
                    break p;
                }
            };
            let r = if rlo == rhi { rlo } else { rng.random_range(rlo..rhi) };
            let mut axis = || r * rng.random_range(0.7..1.3);
            let radii = (axis(), axis(), axis());
            Blob { shape: Ellipsoid { center, radii }, angle: rng.random_range(0.0..core::f64::consts::PI) }
        })
        .collect()
}

/// `(image in HU, mask of 0/1)`, deterministic in `cfg`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<(Volume, Volume), PhantomError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blobs = sample_blobs(cfg, &mut rng);
    let lungs = cfg.lungs();
    let (nx, ny, nz) = cfg.dims;
    let ((bx, by), (brx, bry), rim) = body_geometry(nx, ny);
    let (irx, iry) = (brx - rim, bry - rim);
    let noise = Normal::new(0.0f32, cfg.noise_sigma).expect("validated sigma");
    let mut image = Vec::with_capacity(nx * ny * nz);
    let mut mask = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy, fz) = (x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
                let body = ((fx - bx) / brx).powi(2) + ((fy - by) / bry).powi(2);
                let inner = ((fx - bx) / irx).powi(2) + ((fy - by) / iry).powi(2);
                let in_lung = lungs.iter().any(|l| l.contains(fx, fy, fz));
                let lesion = in_lung && blobs.iter().any(|b| b.contains(fx, fy, fz));
                let base = if body > 1.0 {
                    AIR_HU
                } else if inner > 1.0 {
                    cfg.bone_hu
                } else if lesion {
                    cfg.infection_hu
                } else if in_lung {
                    cfg.lung_hu
                } else {
                    cfg.tissue_hu
                };
                let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                image.push((base + n).clamp(HU_FLOOR, HU_CEIL));
                mask.push(lesion as u8 as f32);
            }
        }
    }
    let meta = VolumeMeta::new(cfg.dims, cfg.spacing);
    let image = Volume::new(meta.clone(), image).expect("finite voxels");
    let mask = Volume::new(meta, mask).expect("finite voxels");
    Ok((image, mask))
}

/// Every axial plane of a phantom as raw-HU slice pairs.
pub fn phantom_slices(cfg: &PhantomConfig) -> Result<Vec<SlicePair>, PhantomError> {
    let (image, mask) = generate_phantom(cfg)?;
    Ok(image
        .slices()
        .zip(mask.slices())
        .map(|(s, m)| SlicePair::new(s, binarize_mask(&m, 0.5)))
        .collect())
}
