//! Exact Euclidean distance transform.
//!
//! Separable lower-envelope-of-parabolas algorithm (Felzenszwalb and
//! Huttenlocher) evaluated in integer arithmetic, so squared distances are
//! exact and `sqrt` of them agrees bit-for-bit with a brute-force scan.

use alloc::vec;
use alloc::vec::Vec;

/// Marker for "no feature pixel anywhere".
pub const NO_FEATURE: u64 = u64::MAX;

/// 1D transform: `out[x] = min_q (x - q)^2 + f[q]` over finite `f[q]`.
fn envelope_1d(f: &[u64], out: &mut [u64], hull: &mut Vec<usize>) {
    let n = f.len();
    let big = |i: usize| f[i] as i128 + (i * i) as i128;
    hull.clear();
    for q in 0..n {
        if f[q] == NO_FEATURE {
            continue;
        }
        while let Some(&p) = hull.last() {
            if hull.len() < 2 {
                break;
            }
            let pp = hull[hull.len() - 2];
            // intersection(q, p) <= intersection(p, pp) => p never wins
            let lhs = (big(q) - big(p)) * (p as i128 - pp as i128);
            let rhs = (big(p) - big(pp)) * (q as i128 - p as i128);
            if lhs <= rhs {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(q);
    }
    if hull.is_empty() {
        out.iter_mut().for_each(|o| *o = NO_FEATURE);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() {
            let (a, b) = (hull[k], hull[k + 1]);
            // intersection(b, a) < x
            if big(b) - big(a) < (x as i128) * 2 * (b as i128 - a as i128) {
                k += 1;
            } else {
                break;
            }
        }
        let q = hull[k];
        let d = x as i64 - q as i64;
        *o = (d * d) as u64 + f[q];
    }
}

/// Squared Euclidean distance from every pixel to the nearest feature pixel.
///
/// Returns [`NO_FEATURE`] everywhere when there are no features.
pub fn squared_edt(width: usize, height: usize, is_feature: &[bool]) -> Vec<u64> {
    assert_eq!(width * height, is_feature.len());
    let mut rows = vec![NO_FEATURE; width * height];
    let mut hull = Vec::new();
    let mut line_in = vec![0u64; width.max(height)];
    let mut line_out = vec![0u64; width.max(height)];
    for y in 0..height {
        for x in 0..width {
            line_in[x] = if is_feature[y * width + x] { 0 } else { NO_FEATURE };
        }
        envelope_1d(&line_in[..width], &mut line_out[..width], &mut hull);
        rows[y * width..(y + 1) * width].copy_from_slice(&line_out[..width]);
    }
    let mut out = vec![NO_FEATURE; width * height];
    for x in 0..width {
        for y in 0..height {
            line_in[y] = rows[y * width + x];
        }
        envelope_1d(&line_in[..height], &mut line_out[..height], &mut hull);
        for y in 0..height {
            out[y * width + x] = line_out[y];
        }
    }
    out
}

/// Euclidean distances; `None` when there are no features.
pub fn edt(width: usize, height: usize, is_feature: &[bool]) -> Option<Vec<f64>> {
    let sq = squared_edt(width, height, is_feature);
    if sq.first() == Some(&NO_FEATURE) {
        return None;
    }
    Some(sq.into_iter().map(|d| crate::math::sqrt(d as f64)).collect())
}
