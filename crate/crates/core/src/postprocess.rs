//! Mask refinement: threshold, 3×3 opening and closing, small-component
//! removal and resizing back to the source resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{MaskSlice, Slice2D};
use crate::preprocess::resize_nearest_mask;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PostprocessError {
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f32),
    #[error("target size must be positive, got {0}x{1}")]
    BadSize(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PostprocessConfig {
    pub threshold: f32,
    /// Components strictly smaller than this are dropped.
    pub min_component_px: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { threshold: 0.3, min_component_px: 10 }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(PostprocessError::BadThreshold(self.threshold));
        }
        Ok(())
    }
}

/// Foreground where `p > thr`.
pub fn threshold_mask(p: &Slice2D, thr: f32) -> Result<MaskSlice, PostprocessError> {
    if !(thr > 0.0 && thr < 1.0) {
        return Err(PostprocessError::BadThreshold(thr));
    }
    Ok(MaskSlice::from_raw(p.width(), p.height(), p.pixels().iter().map(|&v| (v > thr) as u8).collect()))
}

/// 3×3 square min (`erode`) or max filter; outside pixels are background.
fn filter3(m: &MaskSlice, erode: bool) -> MaskSlice {
    let (w, h) = m.dims();
    let src = m.pixels();
    // horizontal pass then vertical pass; the square element is separable
    let mut tmp = vec![0u8; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let at = |i: isize| if i < 0 || i >= w as isize { 0 } else { row[i as usize] };
            let (a, b, c) = (at(x as isize - 1), row[x], at(x as isize + 1));
            tmp[y * w + x] = if erode { a & b & c } else { a | b | c };
        }
    }
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let at = |j: isize| if j < 0 || j >= h as isize { 0 } else { tmp[j as usize * w + x] };
            let (a, b, c) = (at(y as isize - 1), tmp[y * w + x], at(y as isize + 1));
            out[y * w + x] = if erode { a & b & c } else { a | b | c };
        }
    }
    MaskSlice::from_raw(w, h, out)
}

pub fn erode(m: &MaskSlice) -> MaskSlice {
    filter3(m, true)
}

pub fn dilate(m: &MaskSlice) -> MaskSlice {
    filter3(m, false)
}

/// Erosion followed by dilation; removes specks thinner than 3 px.
pub fn morph_open(m: &MaskSlice) -> MaskSlice {
    dilate(&erode(m))
}

/// Dilation followed by erosion; fills holes and gaps narrower than 3 px.
pub fn morph_close(m: &MaskSlice) -> MaskSlice {
    erode(&dilate(m))
}

/// 8-connected component labels (1-based, in raster order of first pixel)
/// and each component's area; background is 0.
pub fn label_components(m: &MaskSlice) -> (Vec<u32>, Vec<usize>) {
    let (w, h) = m.dims();
    let mut labels = vec![0u32; w * h];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if m.pixels()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = areas.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            area += 1;
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if m.pixels()[j] != 0 && labels[j] == 0 {
                        labels[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

pub fn remove_small_components(m: &MaskSlice, min_px: usize) -> MaskSlice {
    let (labels, areas) = label_components(m);
    let keep = |l: u32| l != 0 && areas[l as usize - 1] >= min_px;
    MaskSlice::from_raw(m.width(), m.height(), labels.iter().map(|&l| keep(l) as u8).collect())
}

pub fn resize_mask_to(m: &MaskSlice, ow: usize, oh: usize) -> Result<MaskSlice, PostprocessError> {
    if ow == 0 || oh == 0 {
        return Err(PostprocessError::BadSize(ow, oh));
    }
    Ok(resize_nearest_mask(m, ow, oh))
}

/// threshold → open → close → drop small components, at model resolution.
pub fn refine(p: &Slice2D, cfg: &PostprocessConfig) -> Result<MaskSlice, PostprocessError> {
    cfg.validate()?;
    let m = threshold_mask(p, cfg.threshold)?;
    let m = morph_close(&morph_open(&m));
    Ok(remove_small_components(&m, cfg.min_component_px))
}

/// [`refine`] followed by a nearest-neighbour resize to `orig = (w, h)`.
pub fn postprocess_pipeline(p: &Slice2D, orig: (usize, usize), cfg: &PostprocessConfig) -> Result<MaskSlice, PostprocessError> {
    let m = refine(p, cfg)?;
    resize_mask_to(&m, orig.0, orig.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_is_strict() {
        let p = Slice2D::filled(3, 3, 0.3);
        assert!(threshold_mask(&p, 0.3).unwrap().is_empty());
        assert_eq!(threshold_mask(&Slice2D::filled(3, 3, 1.0), 0.3).unwrap().count(), 9);
        assert!(threshold_mask(&p, 0.0).is_err());
        assert!(threshold_mask(&p, 1.0).is_err());
    }

    #[test]
    fn border_counts_as_background() {
        assert!(erode(&MaskSlice::ones(2, 2)).is_empty());
        assert_eq!(erode(&MaskSlice::ones(3, 3)).count(), 1);
    }

    #[test]
    fn labels_diagonal_neighbours_together() {
        let m = MaskSlice::from_fn(4, 4, |x, y| x == y);
        let (_, areas) = label_components(&m);
        assert_eq!(areas, vec![4]);
    }
}
