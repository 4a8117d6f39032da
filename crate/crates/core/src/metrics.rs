//! Overlap, boundary-distance, classification and ROC metrics for binary masks.
//!
//! Boundary pixels are foreground pixels with a background 4-neighbour or a
//! side on the image edge. Distances are Euclidean in pixel units and come
//! from the exact distance transform in [`crate::edt`].

use alloc::vec;
use alloc::vec::Vec;

use crate::edt::edt;
use crate::image::{MaskSlice, Slice2D};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch((usize, usize), (usize, usize)),
    #[error("boundary distance is undefined when a mask is empty")]
    EmptyMask,
    #[error("ROC needs at least one positive and one negative pixel")]
    DegenerateLabels,
    #[error("{0}")]
    BadValue(&'static str),
}

fn same_dims(a: &MaskSlice, b: &MaskSlice) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

/// Pixel counts of `pred` against `truth`, foreground as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn from_masks(pred: &MaskSlice, truth: &MaskSlice) -> Result<Self, MetricsError> {
        same_dims(pred, truth)?;
        let mut c = Self::default();
        for (&p, &t) in pred.pixels().iter().zip(truth.pixels()) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&self, o: &Self) -> Self {
        Self { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_, tn: self.tn + o.tn }
    }

    /// `2tp / (2tp + fp + fn)`, 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 { 1.0 } else { (2 * self.tp) as f64 / d as f64 }
    }

    pub fn iou(&self) -> f64 {
        let u = self.tp + self.fp + self.fn_;
        if u == 0 { 1.0 } else { self.tp as f64 / u as f64 }
    }

    /// IoU of the background class.
    pub fn background_iou(&self) -> f64 {
        let u = self.tn + self.fp + self.fn_;
        if u == 0 { 1.0 } else { self.tn as f64 / u as f64 }
    }

    pub fn mean_iou(&self) -> f64 {
        0.5 * (self.iou() + self.background_iou())
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    fn swapped(&self) -> Self {
        Self { tp: self.tn, fp: self.fn_, fn_: self.fp, tn: self.tp }
    }
}

pub fn confusion(pred: &MaskSlice, truth: &MaskSlice) -> Result<ConfusionCounts, MetricsError> {
    ConfusionCounts::from_masks(pred, truth)
}

pub fn dice_coeff(a: &MaskSlice, b: &MaskSlice) -> Result<f64, MetricsError> {
    Ok(confusion(a, b)?.dice())
}

pub fn iou(a: &MaskSlice, b: &MaskSlice) -> Result<f64, MetricsError> {
    Ok(confusion(a, b)?.iou())
}

pub fn mean_iou(a: &MaskSlice, b: &MaskSlice) -> Result<f64, MetricsError> {
    Ok(confusion(a, b)?.mean_iou())
}

pub fn binary_accuracy(a: &MaskSlice, b: &MaskSlice) -> Result<f64, MetricsError> {
    Ok(confusion(a, b)?.accuracy())
}

/// Per-pixel boundary flags.
pub fn boundary_mask(m: &MaskSlice) -> Vec<bool> {
    let (w, h) = m.dims();
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let edge = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
            out[y * w + x] = edge || !m.get(x - 1, y) || !m.get(x + 1, y) || !m.get(x, y - 1) || !m.get(x, y + 1);
        }
    }
    out
}

/// Boundary pixels as `(x, y)` in raster order.
pub fn boundary_pixels(m: &MaskSlice) -> Vec<(usize, usize)> {
    let w = m.width();
    boundary_mask(m).iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| (i % w, i / w)).collect()
}

/// Distances from each boundary pixel of `from` to the nearest boundary pixel of `to`.
fn directed(from: &[bool], to: &[bool], w: usize, h: usize) -> Vec<f64> {
    let d = edt(w, h, to).expect("non-empty boundary");
    from.iter().zip(d).filter(|(&f, _)| f).map(|(_, d)| d).collect()
}

fn both_directions(a: &MaskSlice, b: &MaskSlice) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    same_dims(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyMask);
    }
    let (w, h) = a.dims();
    let (ba, bb) = (boundary_mask(a), boundary_mask(b));
    Ok((directed(&ba, &bb, w, h), directed(&bb, &ba, w, h)))
}

/// Average symmetric surface distance.
pub fn assd(a: &MaskSlice, b: &MaskSlice) -> Result<f64, MetricsError> {
    let (ab, ba) = both_directions(a, b)?;
    // per-direction sums keep the result exactly symmetric in (a, b)
    let sum = ab.iter().sum::<f64>() + ba.iter().sum::<f64>();
    Ok(sum / (ab.len() + ba.len()) as f64)
}

/// Symmetric Hausdorff distance (maximum, not a percentile).
pub fn hausdorff(a: &MaskSlice, b: &MaskSlice) -> Result<f64, MetricsError> {
    let (ab, ba) = both_directions(a, b)?;
    Ok(ab.iter().chain(&ba).fold(0.0, |m, &d| f64::max(m, d)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// A zero denominator was replaced by 0.
    pub zero_division: bool,
}

impl ClassStats {
    fn from_counts(c: &ConfusionCounts) -> Self {
        let mut zero_division = false;
        let mut ratio = |n: u64, d: u64| {
            if d == 0 {
                zero_division = true;
                0.0
            } else {
                n as f64 / d as f64
            }
        };
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        Self { precision, recall, f1, support: c.tp + c.fn_, zero_division }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationReport {
    pub background: ClassStats,
    pub foreground: ClassStats,
    pub confusion: ConfusionCounts,
}

impl ClassificationReport {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        Self { background: ClassStats::from_counts(&c.swapped()), foreground: ClassStats::from_counts(&c), confusion: c }
    }
}

pub fn classification_report(pred: &MaskSlice, truth: &MaskSlice) -> Result<ClassificationReport, MetricsError> {
    Ok(ClassificationReport::from_counts(confusion(pred, truth)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Pixel-level ROC over all slices with trapezoidal AUC; tied scores form
/// a single step.
pub fn roc_auc(probs: &[Slice2D], truths: &[MaskSlice]) -> Result<RocCurve, MetricsError> {
    if probs.len() != truths.len() {
        return Err(MetricsError::BadValue("number of probability maps and masks differ"));
    }
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for (p, t) in probs.iter().zip(truths) {
        if p.dims() != t.dims() {
            return Err(MetricsError::DimMismatch(p.dims(), t.dims()));
        }
        scored.extend(p.pixels().iter().zip(t.pixels()).map(|(&s, &l)| (s, l != 0)));
    }
    let pos = scored.iter().filter(|s| s.1).count() as f64;
    let neg = scored.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(MetricsError::DegenerateLabels);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut auc = 0.0;
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 { tp += 1 } else { fp += 1 }
            i += 1;
        }
        let (x0, y0) = *points.last().unwrap();
        let pt = (fp as f64 / neg, tp as f64 / pos);
        auc += (pt.0 - x0) * (pt.1 + y0) * 0.5;
        points.push(pt);
    }
    Ok(RocCurve { points, auc })
}

/// `bins` uniform bins over [0, 1]; 1.0 lands in the last bin.
pub fn iou_histogram(values: &[f64], bins: usize) -> Result<Vec<u64>, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::BadValue("bin count must be positive"));
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::BadValue("histogram values must lie in [0, 1]"));
        }
        let b = crate::math::floor(v * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    Ok(counts)
}

/// Metrics of a set of predicted slices against ground truth.
///
/// Overlap and classification values are pooled over all pixels; the
/// `mean_slice_*` fields average per slice instead. Boundary distances are
/// averaged over the slices where both masks are non-empty and are `None`
/// when there is no such slice.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dice: f64,
    pub iou: f64,
    pub mean_iou: f64,
    pub binary_accuracy: f64,
    pub mean_slice_dice: f64,
    pub mean_slice_iou: f64,
    pub assd: Option<f64>,
    pub hausdorff: Option<f64>,
    /// Slices that contributed to the boundary distances.
    pub distance_slices: usize,
    /// `None` when all pixels share a label.
    pub auc: Option<f64>,
    pub classes: ClassificationReport,
    pub per_slice_dice: Vec<f64>,
    pub per_slice_iou: Vec<f64>,
}

pub fn evaluate(preds: &[MaskSlice], probs: &[Slice2D], truths: &[MaskSlice]) -> Result<EvalReport, MetricsError> {
    if preds.len() != truths.len() || probs.len() != truths.len() {
        return Err(MetricsError::BadValue("prediction, probability and truth counts differ"));
    }
    if truths.is_empty() {
        return Err(MetricsError::BadValue("no slices to evaluate"));
    }
    let mut pooled = ConfusionCounts::default();
    let (mut per_slice_dice, mut per_slice_iou) = (Vec::new(), Vec::new());
    let (mut assd_sum, mut hd_sum, mut n_dist) = (0.0, 0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        let c = confusion(p, t)?;
        pooled = pooled.merge(&c);
        per_slice_dice.push(c.dice());
        per_slice_iou.push(c.iou());
        if !p.is_empty() && !t.is_empty() {
            assd_sum += assd(p, t)?;
            hd_sum += hausdorff(p, t)?;
            n_dist += 1;
        }
    }
    let auc = match roc_auc(probs, truths) {
        Ok(r) => Some(r.auc),
        Err(MetricsError::DegenerateLabels) => None,
        Err(e) => return Err(e),
    };
    let n = truths.len() as f64;
    let avg = |s: f64| (n_dist > 0).then(|| s / n_dist as f64);
    Ok(EvalReport {
        dice: pooled.dice(),
        iou: pooled.iou(),
        mean_iou: pooled.mean_iou(),
        binary_accuracy: pooled.accuracy(),
        mean_slice_dice: per_slice_dice.iter().sum::<f64>() / n,
        mean_slice_iou: per_slice_iou.iter().sum::<f64>() / n,
        assd: avg(assd_sum),
        hausdorff: avg(hd_sum),
        distance_slices: n_dist,
        auc,
        classes: ClassificationReport::from_counts(pooled),
        per_slice_dice,
        per_slice_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_pair_conventions() {
        let z = MaskSlice::zeros(3, 3);
        assert_eq!(dice_coeff(&z, &z).unwrap(), 1.0);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
        assert_eq!(assd(&z, &MaskSlice::ones(3, 3)), Err(MetricsError::EmptyMask));
    }

    #[test]
    fn swapped_confusion_is_background_view() {
        let c = ConfusionCounts { tp: 1, fp: 2, fn_: 3, tn: 4 };
        assert_eq!(c.swapped().swapped(), c);
        assert_eq!(c.swapped().iou(), c.background_iou());
    }
}
