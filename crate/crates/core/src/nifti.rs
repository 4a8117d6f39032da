//! NIfTI-1 single-file (`.nii`) codec.
//!
//! Only the fields needed to recover a 3D scalar volume are interpreted:
//! `dim`, `datatype`, `pixdim`, `vox_offset`, `scl_slope`, `scl_inter` and
//! the magic string. Orientation (`qform`/`sform`) is parsed past but not
//! used; all processing happens in voxel space. Compressed streams must be
//! inflated by the caller.

use alloc::vec::Vec;

use crate::image::Slice2D;

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag block.
pub const WRITE_VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_MAGIC: usize = 344;
const MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NiftiError {
    #[error("not a single-file NIfTI-1 image (bad magic)")]
    BadMagic,
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("voxel {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("slice index {index} out of range for {nz} slices")]
    OutOfRange { index: usize, nz: usize },
    #[error("volume has {actual} voxels, dims require {expected}")]
    LengthMismatch { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeMeta {
    /// `(nx, ny, nz)`.
    pub dims: (usize, usize, usize),
    /// Millimeters per voxel along each axis.
    pub spacing: (f32, f32, f32),
    pub datatype_code: i16,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub endianness: Endianness,
}

impl VolumeMeta {
    /// Float32, unscaled, little-endian metadata: what [`write_nifti`] emits.
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32)) -> Self {
        Self {
            dims,
            spacing,
            datatype_code: DT_FLOAT32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            endianness: Endianness::Little,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    fn validate(&self) -> Result<(), NiftiError> {
        let (nx, ny, nz) = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(NiftiError::InvalidHeader("dimensions must be positive"));
        }
        let (sx, sy, sz) = self.spacing;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0 && sx.is_finite() && sy.is_finite() && sz.is_finite())
        {
            return Err(NiftiError::InvalidHeader("voxel spacing must be positive and finite"));
        }
        match self.datatype_code {
            DT_UINT8 | DT_INT16 | DT_FLOAT32 => Ok(()),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }
}

/// A 3D scalar field in Hounsfield Units, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    meta: VolumeMeta,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(meta: VolumeMeta, voxels: Vec<f32>) -> Result<Self, NiftiError> {
        meta.validate()?;
        if voxels.len() != meta.voxel_count() {
            return Err(NiftiError::LengthMismatch {
                expected: meta.voxel_count(),
                actual: voxels.len(),
            });
        }
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(NiftiError::NonFinite { index });
        }
        Ok(Self { meta, voxels })
    }

    /// Stack equally sized slices along z.
    pub fn from_slices(slices: &[Slice2D], spacing: (f32, f32, f32)) -> Result<Self, NiftiError> {
        let first = slices.first().ok_or(NiftiError::InvalidHeader("no slices"))?;
        let (w, h) = first.dims();
        if slices.iter().any(|s| s.dims() != (w, h)) {
            return Err(NiftiError::InvalidHeader("slices differ in size"));
        }
        let voxels = slices.iter().flat_map(|s| s.pixels().iter().copied()).collect();
        Self::new(VolumeMeta::new((w, h, slices.len()), spacing), voxels)
    }

    pub fn meta(&self) -> &VolumeMeta {
        &self.meta
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.meta.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.meta.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        let (nx, ny, _) = self.meta.dims;
        self.voxels[(z * ny + y) * nx + x]
    }

    /// The `nx × ny` plane at index `z`, row-major with x fastest.
    pub fn extract_slice(&self, z: usize) -> Result<Slice2D, NiftiError> {
        let (nx, ny, nz) = self.meta.dims;
        if z >= nz {
            return Err(NiftiError::OutOfRange { index: z, nz });
        }
        let plane = nx * ny;
        Ok(Slice2D::from_raw(nx, ny, self.voxels[z * plane..(z + 1) * plane].to_vec()))
    }

    pub fn slices(&self) -> impl Iterator<Item = Slice2D> + '_ {
        (0..self.meta.dims.2).map(move |z| self.extract_slice(z).expect("z in range"))
    }

    /// Equality of geometry and voxel values, ignoring on-disk encoding.
    pub fn same_content(&self, other: &Volume) -> bool {
        self.meta.dims == other.meta.dims
            && self.meta.spacing == other.meta.spacing
            && self.voxels.len() == other.voxels.len()
            && self.voxels.iter().zip(&other.voxels).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endianness,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.bytes[at], self.bytes[at + 1]];
        match self.endian {
            Endianness::Little => i16::from_le_bytes(b),
            Endianness::Big => i16::from_be_bytes(b),
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = [self.bytes[at], self.bytes[at + 1], self.bytes[at + 2], self.bytes[at + 3]];
        match self.endian {
            Endianness::Little => f32::from_le_bytes(b),
            Endianness::Big => f32::from_be_bytes(b),
        }
    }
}

/// Parse a single-file NIfTI-1 image into a [`Volume`] of Hounsfield Units.
///
/// Voxels are scaled as `raw * scl_slope + scl_inter`, with a slope of zero
/// (or a non-finite slope) meaning "unscaled".
pub fn read_nifti(bytes: &[u8]) -> Result<Volume, NiftiError> {
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::Truncated { needed: HEADER_SIZE, available: bytes.len() });
    }
    if &bytes[OFF_MAGIC..OFF_MAGIC + 4] != MAGIC {
        return Err(NiftiError::BadMagic);
    }
    let mut r = Reader { bytes, endian: Endianness::Little };
    if !(1..=7).contains(&r.i16(OFF_DIM)) {
        r.endian = Endianness::Big;
        if !(1..=7).contains(&r.i16(OFF_DIM)) {
            return Err(NiftiError::InvalidHeader("dim[0] outside 1..7 in either byte order"));
        }
    }
    let ndim = r.i16(OFF_DIM) as usize;
    let mut dims = [1usize; 3];
    let mut spacing = [1.0f32; 3];
    for axis in 0..3 {
        if axis < ndim {
            let d = r.i16(OFF_DIM + 2 * (axis + 1));
            if d < 1 {
                return Err(NiftiError::InvalidHeader("non-positive dimension"));
            }
            dims[axis] = d as usize;
            let s = r.f32(OFF_PIXDIM + 4 * (axis + 1));
            if !(s.is_finite() && s > 0.0) {
                return Err(NiftiError::InvalidHeader("non-positive voxel spacing"));
            }
            spacing[axis] = s;
        }
    }
    for axis in 3..ndim {
        if r.i16(OFF_DIM + 2 * (axis + 1)) > 1 {
            return Err(NiftiError::InvalidHeader("only 3D volumes are supported"));
        }
    }
    let datatype = r.i16(OFF_DATATYPE);
    let bytes_per_voxel = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= 0.0) {
        return Err(NiftiError::InvalidHeader("bad vox_offset"));
    }
    let vox_offset = (crate::math::round(vox_offset as f64) as usize).max(HEADER_SIZE);
    let raw_slope = r.f32(OFF_SCL_SLOPE);
    let raw_inter = r.f32(OFF_SCL_INTER);
    let slope = if raw_slope == 0.0 || !raw_slope.is_finite() { 1.0 } else { raw_slope };
    let inter = if raw_inter.is_finite() { raw_inter } else { 0.0 };

    let count = dims[0] * dims[1] * dims[2];
    let needed = vox_offset + count * bytes_per_voxel;
    if bytes.len() < needed {
        return Err(NiftiError::Truncated { needed, available: bytes.len() });
    }
    let scaled = !(slope == 1.0 && inter == 0.0);
    let mut voxels = Vec::with_capacity(count);
    for i in 0..count {
        let at = vox_offset + i * bytes_per_voxel;
        let raw = match datatype {
            DT_UINT8 => bytes[at] as f32,
            DT_INT16 => r.i16(at) as f32,
            _ => r.f32(at),
        };
        let hu = if scaled { (raw as f64 * slope as f64 + inter as f64) as f32 } else { raw };
        if !hu.is_finite() {
            return Err(NiftiError::NonFinite { index: i });
        }
        voxels.push(hu);
    }
    let meta = VolumeMeta {
        dims: (dims[0], dims[1], dims[2]),
        spacing: (spacing[0], spacing[1], spacing[2]),
        datatype_code: datatype,
        scl_slope: raw_slope,
        scl_inter: raw_inter,
        endianness: r.endian,
    };
    Ok(Volume { meta, voxels })
}

/// Encode as little-endian float32 NIfTI-1, unscaled, data at byte 352.
pub fn write_nifti(v: &Volume) -> Vec<u8> {
    let (nx, ny, nz) = v.meta.dims;
    let mut out = alloc::vec![0u8; WRITE_VOX_OFFSET + 4 * v.voxels.len()];
    let put_i16 = |buf: &mut [u8], at: usize, x: i16| buf[at..at + 2].copy_from_slice(&x.to_le_bytes());
    let put_f32 = |buf: &mut [u8], at: usize, x: f32| buf[at..at + 4].copy_from_slice(&x.to_le_bytes());

    out[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    let dim = [3i16, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        put_i16(&mut out, OFF_DIM + 2 * i, *d);
    }
    put_i16(&mut out, OFF_DATATYPE, DT_FLOAT32);
    put_i16(&mut out, OFF_BITPIX, 32);
    let (sx, sy, sz) = v.meta.spacing;
    let pixdim = [1.0f32, sx, sy, sz, 1.0, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut out, OFF_PIXDIM + 4 * i, *p);
    }
    put_f32(&mut out, OFF_VOX_OFFSET, WRITE_VOX_OFFSET as f32);
    put_f32(&mut out, OFF_SCL_SLOPE, 1.0);
    put_f32(&mut out, OFF_SCL_INTER, 0.0);
    // millimeters
    out[OFF_XYZT_UNITS] = 2;
    out[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(MAGIC);
    for (i, x) in v.voxels.iter().enumerate() {
        put_f32(&mut out, WRITE_VOX_OFFSET + 4 * i, *x);
    }
    out
}
