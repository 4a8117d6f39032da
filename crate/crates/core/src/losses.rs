//! Segmentation losses built from tape primitives, and the signed distance
//! map consumed by the boundary term.
//!
//! Every loss takes probabilities `p` and a same-shaped binary target `t`
//! recorded on the same [`Tape`], and returns a one-element [`Var`]. Sums run
//! over the whole batch, so Dice is pooled across samples.

use alloc::vec::Vec;

use crate::autodiff::{AutodiffError, Shape, Tape, Tensor, Var};
use crate::edt::{squared_edt, NO_FEATURE};
use crate::image::MaskSlice;
use crate::math::sqrt;

pub const DEFAULT_EPS: f32 = 1e-6;
/// Range the batch-derived foreground weight is clamped to.
pub const POS_WEIGHT_RANGE: (f32, f32) = (1.0, 100.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("prediction shape {pred} does not match target shape {target}")]
    ShapeMismatch { pred: Shape, target: Shape },
    #[error("BCE weight must lie in [0, 1], got {0}")]
    BadLambda(f32),
    #[error("foreground weight must be positive and finite, got {0}")]
    BadWeight(f32),
    #[error("alpha must lie in [0, 1], got {0}")]
    BadAlpha(f32),
    #[error("smoothing eps must be positive and finite, got {0}")]
    BadEps(f32),
    #[error("this loss needs signed distance maps")]
    MissingDistanceMap,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which objective the trainer minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Dice,
    Bce,
    BceDice,
    LogDice,
    Surface,
    WeightedBceDice,
    Generalized,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Dice,
        LossKind::Bce,
        LossKind::BceDice,
        LossKind::LogDice,
        LossKind::Surface,
        LossKind::WeightedBceDice,
        LossKind::Generalized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Bce => "bce",
            LossKind::BceDice => "bce_dice",
            LossKind::LogDice => "log_dice",
            LossKind::Surface => "surface",
            LossKind::WeightedBceDice => "weighted_bce_dice",
            LossKind::Generalized => "generalized",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Whether the loss reads signed distance maps.
    pub fn needs_distance_map(self) -> bool {
        matches!(self, LossKind::Surface | LossKind::Generalized)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// λ in `λ·bce + (1−λ)·dice`.
    pub bce_weight: f32,
    /// Foreground weight; `None` derives `#bg/#fg` from each batch.
    pub pos_weight: Option<f32>,
    /// Region-vs-boundary blend of [`generalized_loss`].
    pub alpha: f32,
    pub eps: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { bce_weight: 0.5, pos_weight: None, alpha: 0.5, eps: DEFAULT_EPS }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        check_unit(self.bce_weight, LossError::BadLambda)?;
        check_unit(self.alpha, LossError::BadAlpha)?;
        if let Some(w) = self.pos_weight {
            check_weight(w)?;
        }
        check_eps(self.eps)
    }
}

fn check_unit(v: f32, err: fn(f32) -> LossError) -> Result<(), LossError> {
    if (0.0..=1.0).contains(&v) { Ok(()) } else { Err(err(v)) }
}

fn check_weight(w: f32) -> Result<(), LossError> {
    if w > 0.0 && w.is_finite() { Ok(()) } else { Err(LossError::BadWeight(w)) }
}

fn check_eps(eps: f32) -> Result<(), LossError> {
    if eps > 0.0 && eps.is_finite() { Ok(()) } else { Err(LossError::BadEps(eps)) }
}

fn check_shapes(tape: &Tape, p: Var, t: Var) -> Result<(), LossError> {
    let (pred, target) = (tape.shape(p), tape.shape(t));
    if pred != target {
        return Err(LossError::ShapeMismatch { pred, target });
    }
    Ok(())
}

/// `(2Σpt + eps) / (Σp + Σt + eps)`.
fn dice_score(tape: &mut Tape, p: Var, t: Var, eps: f32) -> Result<Var, LossError> {
    check_shapes(tape, p, t)?;
    check_eps(eps)?;
    let pt = tape.mul(p, t)?;
    let inter = tape.sum(pt)?;
    let twice = tape.scale(inter, 2.0)?;
    let num = tape.offset(twice, eps)?;
    let sp = tape.sum(p)?;
    let st = tape.sum(t)?;
    let both = tape.add(sp, st)?;
    let den = tape.offset(both, eps)?;
    Ok(tape.div(num, den)?)
}

/// `1 − dice_score`; empty prediction against empty target gives 0.
pub fn dice_loss(tape: &mut Tape, p: Var, t: Var, eps: f32) -> Result<Var, LossError> {
    let s = dice_score(tape, p, t, eps)?;
    let neg = tape.scale(s, -1.0)?;
    Ok(tape.offset(neg, 1.0)?)
}

/// `−ln(dice_score)`.
pub fn log_dice_loss(tape: &mut Tape, p: Var, t: Var, eps: f32) -> Result<Var, LossError> {
    let s = dice_score(tape, p, t, eps)?;
    let l = tape.ln(s)?;
    Ok(tape.scale(l, -1.0)?)
}

/// Per-pixel negative log-likelihood `−[t·ln(p+eps) + (1−t)·ln(1−p+eps)]`.
fn bce_terms(tape: &mut Tape, p: Var, t: Var, eps: f32) -> Result<Var, LossError> {
    check_shapes(tape, p, t)?;
    check_eps(eps)?;
    let pe = tape.offset(p, eps)?;
    let lp = tape.ln(pe)?;
    let neg_p = tape.scale(p, -1.0)?;
    let qe = tape.offset(neg_p, 1.0 + eps)?;
    let lq = tape.ln(qe)?;
    let neg_t = tape.scale(t, -1.0)?;
    let omt = tape.offset(neg_t, 1.0)?;
    let a = tape.mul(lp, t)?;
    let b = tape.mul(lq, omt)?;
    let ll = tape.add(a, b)?;
    Ok(tape.scale(ll, -1.0)?)
}

/// Mean binary cross-entropy.
pub fn bce_loss(tape: &mut Tape, p: Var, t: Var, eps: f32) -> Result<Var, LossError> {
    let terms = bce_terms(tape, p, t, eps)?;
    Ok(tape.mean(terms)?)
}

fn blend(tape: &mut Tape, a: Var, b: Var, wa: f32) -> Result<Var, LossError> {
    let x = tape.scale(a, wa)?;
    let y = tape.scale(b, 1.0 - wa)?;
    Ok(tape.add(x, y)?)
}

/// `λ·bce + (1−λ)·dice`.
pub fn bce_dice_loss(tape: &mut Tape, p: Var, t: Var, lambda: f32, eps: f32) -> Result<Var, LossError> {
    check_unit(lambda, LossError::BadLambda)?;
    let b = bce_loss(tape, p, t, eps)?;
    let d = dice_loss(tape, p, t, eps)?;
    blend(tape, b, d, lambda)
}

/// `#background / #foreground` of a binary target, clamped to
/// [`POS_WEIGHT_RANGE`]; the upper bound when there is no foreground.
pub fn batch_pos_weight(target: &Tensor) -> f32 {
    let fg = target.data().iter().filter(|&&v| v > 0.5).count();
    let bg = target.len() - fg;
    let (lo, hi) = POS_WEIGHT_RANGE;
    if fg == 0 {
        return hi;
    }
    (bg as f32 / fg as f32).clamp(lo, hi)
}

/// Cross-entropy with foreground terms weighted by `w_pos`, normalized by the
/// total pixel weight.
pub fn weighted_bce_loss(tape: &mut Tape, p: Var, t: Var, w_pos: f32, eps: f32) -> Result<Var, LossError> {
    check_weight(w_pos)?;
    let terms = bce_terms(tape, p, t, eps)?;
    let tv = tape.value(t);
    let mut total = 0.0f64;
    let weights = Tensor::from_fn(tv.shape(), |i| {
        let w = if tv.data()[i] > 0.5 { w_pos } else { 1.0 };
        total += w as f64;
        w
    });
    let wv = tape.constant(weights);
    let weighted = tape.mul(terms, wv)?;
    let s = tape.sum(weighted)?;
    Ok(tape.scale(s, (1.0 / total.max(1.0)) as f32)?)
}

/// `λ·weighted_bce + (1−λ)·dice`.
pub fn weighted_bce_dice_loss(
    tape: &mut Tape,
    p: Var,
    t: Var,
    w_pos: f32,
    lambda: f32,
    eps: f32,
) -> Result<Var, LossError> {
    check_unit(lambda, LossError::BadLambda)?;
    let b = weighted_bce_loss(tape, p, t, w_pos, eps)?;
    let d = dice_loss(tape, p, t, eps)?;
    blend(tape, b, d, lambda)
}

/// Boundary loss `mean(p · sdm)`; `sdm` is a constant tensor shaped like `p`.
pub fn surface_loss(tape: &mut Tape, p: Var, sdm: Var) -> Result<Var, LossError> {
    check_shapes(tape, p, sdm)?;
    let prod = tape.mul(p, sdm)?;
    Ok(tape.mean(prod)?)
}

/// `alpha·weighted_bce_dice + (1−alpha)·surface`.
pub fn generalized_loss(tape: &mut Tape, p: Var, t: Var, sdm: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    cfg.validate()?;
    let w = cfg.pos_weight.unwrap_or_else(|| batch_pos_weight(tape.value(t)));
    let region = weighted_bce_dice_loss(tape, p, t, w, cfg.bce_weight, cfg.eps)?;
    let boundary = surface_loss(tape, p, sdm)?;
    blend(tape, region, boundary, cfg.alpha)
}

/// Evaluate `kind` with the parameters in `cfg`; `sdm` is required by the
/// boundary-aware kinds and ignored otherwise.
pub fn compute_loss(
    tape: &mut Tape,
    kind: LossKind,
    cfg: &LossConfig,
    p: Var,
    t: Var,
    sdm: Option<Var>,
) -> Result<Var, LossError> {
    cfg.validate()?;
    match kind {
        LossKind::Dice => dice_loss(tape, p, t, cfg.eps),
        LossKind::Bce => bce_loss(tape, p, t, cfg.eps),
        LossKind::BceDice => bce_dice_loss(tape, p, t, cfg.bce_weight, cfg.eps),
        LossKind::LogDice => log_dice_loss(tape, p, t, cfg.eps),
        LossKind::Surface => surface_loss(tape, p, sdm.ok_or(LossError::MissingDistanceMap)?),
        LossKind::WeightedBceDice => {
            let w = cfg.pos_weight.unwrap_or_else(|| batch_pos_weight(tape.value(t)));
            weighted_bce_dice_loss(tape, p, t, w, cfg.bce_weight, cfg.eps)
        }
        LossKind::Generalized => generalized_loss(tape, p, t, sdm.ok_or(LossError::MissingDistanceMap)?, cfg),
    }
}

/// Signed Euclidean distance to a mask's boundary.
///
/// The boundary is the set of foreground pixels with a 4-neighbour in the
/// background (pixels past the image edge do not count). Values are negative
/// inside the foreground, positive outside and zero on the boundary. A mask
/// with no boundary takes `±D` everywhere, `D` being the image diagonal: `+D`
/// when empty, `−D` when full.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedDistanceMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl SignedDistanceMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Foreground pixels with at least one background 4-neighbour inside the image.
pub(crate) fn inner_boundary(m: &MaskSlice) -> Vec<bool> {
    let (w, h) = m.dims();
    let mut out = alloc::vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !m.get(x, y) {
                continue;
            }
            let bg = |dx: isize, dy: isize| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && !m.get(nx as usize, ny as usize)
            };
            out[y * w + x] = bg(-1, 0) || bg(1, 0) || bg(0, -1) || bg(0, 1);
        }
    }
    out
}

pub fn signed_distance_map(m: &MaskSlice) -> SignedDistanceMap {
    let (width, height) = m.dims();
    let boundary = inner_boundary(m);
    let sq = squared_edt(width, height, &boundary);
    let diag = sqrt((width * width + height * height) as f64);
    let values = sq
        .iter()
        .zip(m.pixels())
        .map(|(&d, &fg)| {
            let mag = if d == NO_FEATURE { diag } else { sqrt(d as f64) };
            if fg != 0 { -mag } else { mag }
        })
        .collect();
    SignedDistanceMap { width, height, values }
}

/// Stack per-sample maps into an `(N, 1, H, W)` tensor.
///
/// # Panics
/// If the maps differ in size.
pub fn distance_tensor(maps: &[SignedDistanceMap]) -> Tensor {
    let (w, h) = maps.first().map_or((0, 0), |m| (m.width, m.height));
    let mut data = Vec::with_capacity(maps.len() * w * h);
    for m in maps {
        assert_eq!((m.width, m.height), (w, h), "distance maps must share a size");
        data.extend(m.values.iter().map(|&v| v as f32));
    }
    Tensor::from_raw(Shape::new(maps.len(), 1, h, w), data)
}
