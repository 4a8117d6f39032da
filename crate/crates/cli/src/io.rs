//! Files on disk: NIfTI volumes, dataset directories and atomic writes.
//!
//! A dataset directory holds `<stem>_img.nii` files, each optionally paired
//! with `<stem>_mask.nii`. Volumes with more than one plane expand to one
//! slice per plane named `<stem>_zNNN`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use segforge_core::nifti::{read_nifti, write_nifti};
use segforge_core::preprocess::binarize_mask;
use segforge_core::{MaskSlice, Slice2D, SlicePair, Volume};

pub const IMAGE_SUFFIX: &str = "_img.nii";
pub const MASK_SUFFIX: &str = "_mask.nii";
pub const PROB_SUFFIX: &str = "_prob.nii";
pub const MANIFEST: &str = "manifest.csv";

/// Write through a temporary sibling and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().context("output path has no file name")?;
    let mut tmp_name = name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_nifti(&bytes).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_atomic(path, &write_nifti(v))
}

pub fn write_slice(path: &Path, s: &Slice2D, spacing: (f32, f32, f32)) -> Result<()> {
    write_volume(path, &Volume::from_slices(std::slice::from_ref(s), spacing)?)
}

pub fn mask_volume(m: &MaskSlice, spacing: (f32, f32, f32)) -> Result<Volume> {
    Ok(Volume::from_slices(&[m.to_slice()], spacing)?)
}

/// One image file of a dataset directory and its optional mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub stem: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

fn stems_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let rd = fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    for e in rd {
        let name = e?.file_name();
        if let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(suffix)) {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

/// Image entries sorted by stem.
pub fn list_images(dir: &Path) -> Result<Vec<Entry>> {
    Ok(stems_with_suffix(dir, IMAGE_SUFFIX)?
        .into_iter()
        .map(|stem| {
            let mask = dir.join(format!("{stem}{MASK_SUFFIX}"));
            Entry { image: dir.join(format!("{stem}{IMAGE_SUFFIX}")), mask: mask.exists().then_some(mask), stem }
        })
        .collect())
}

/// Mask files sorted by stem, as `(stem, path)`.
pub fn list_masks(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    Ok(stems_with_suffix(dir, MASK_SUFFIX)?
        .into_iter()
        .map(|stem| {
            let p = dir.join(format!("{stem}{MASK_SUFFIX}"));
            (stem, p)
        })
        .collect())
}

/// Names of the planes of a volume stored under `stem`.
pub fn plane_stems(stem: &str, planes: usize) -> Vec<String> {
    if planes == 1 {
        vec![stem.to_string()]
    } else {
        (0..planes).map(|z| format!("{stem}_z{z:03}")).collect()
    }
}

/// A slice read from a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedSlice {
    pub stem: String,
    pub image: Slice2D,
    pub mask: Option<MaskSlice>,
    pub spacing: (f32, f32, f32),
}

pub fn load_slices(dir: &Path) -> Result<Vec<NamedSlice>> {
    let mut out = Vec::new();
    for e in list_images(dir)? {
        let img = read_volume(&e.image)?;
        let mask = e.mask.as_deref().map(read_volume).transpose()?;
        if let Some(m) = &mask {
            if m.dims() != img.dims() {
                bail!("{}: mask is {:?} but image is {:?}", e.stem, m.dims(), img.dims());
            }
        }
        let stems = plane_stems(&e.stem, img.dims().2);
        for (z, stem) in stems.into_iter().enumerate() {
            out.push(NamedSlice {
                stem,
                image: img.extract_slice(z)?,
                mask: mask.as_ref().map(|m| m.extract_slice(z).map(|s| binarize_mask(&s, 0.5))).transpose()?,
                spacing: img.spacing(),
            });
        }
    }
    Ok(out)
}

/// Slices that all carry masks, as training pairs.
pub fn load_pairs(dir: &Path) -> Result<Vec<(String, SlicePair)>> {
    load_slices(dir)?
        .into_iter()
        .map(|s| match s.mask {
            Some(m) => Ok((s.stem, SlicePair::new(s.image, m))),
            None => bail!("{}: no mask file next to the image", s.stem),
        })
        .collect()
}

/// Mask slices of every `<stem>_mask.nii`, expanded per plane.
pub fn load_masks(dir: &Path) -> Result<Vec<(String, MaskSlice)>> {
    let mut out = Vec::new();
    for (stem, path) in list_masks(dir)? {
        let v = read_volume(&path)?;
        for (z, s) in plane_stems(&stem, v.dims().2).into_iter().enumerate() {
            out.push((s, binarize_mask(&v.extract_slice(z)?, 0.5)));
        }
    }
    Ok(out)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

/// Render rows as CSV; fields must not contain commas or newlines.
pub fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// `path` with its extension replaced by `ext`, e.g. `run.ckpt` → `run.history.csv`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}
