//! Binary PGM/PPM encoders and small chart renderings.

use segforge_core::{MaskSlice, Slice2D};

fn header(magic: &str, w: usize, h: usize, maxval: u16) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n{maxval}\n").into_bytes()
}

/// 8-bit graymap of `[0, 1]` intensities (clamped).
pub fn pgm8(s: &Slice2D) -> Vec<u8> {
    let mut out = header("P5", s.width(), s.height(), 255);
    out.extend(s.pixels().iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// 16-bit big-endian graymap of `[0, 1]` values.
pub fn pgm16(s: &Slice2D) -> Vec<u8> {
    let mut out = header("P5", s.width(), s.height(), 65535);
    for &p in s.pixels() {
        out.extend_from_slice(&((p.clamp(0.0, 1.0) * 65535.0).round() as u16).to_be_bytes());
    }
    out
}

/// Graymap with two levels (`maxval` 1).
pub fn pgm_mask(m: &MaskSlice) -> Vec<u8> {
    let mut out = header("P5", m.width(), m.height(), 1);
    out.extend_from_slice(m.pixels());
    out
}

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GREY: Rgb = [200, 200, 200];
pub const BLUE: Rgb = [31, 119, 180];
pub const RED: Rgb = [214, 39, 40];
pub const GREEN: Rgb = [44, 160, 44];

pub struct Canvas {
    pub w: usize,
    pub h: usize,
    px: Vec<Rgb>,
}

impl Canvas {
    pub fn new(w: usize, h: usize) -> Self {
        Self { w, h, px: vec![WHITE; w * h] }
    }

    pub fn set(&mut self, x: i64, y: i64, c: Rgb) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            self.px[y as usize * self.w + x as usize] = c;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.px[y * self.w + x]
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x, y, c);
            }
        }
    }

    /// Graymap using Rec. 601 luma.
    pub fn pgm(&self) -> Vec<u8> {
        let mut out = header("P5", self.w, self.h, 255);
        out.extend(self.px.iter().map(|&[r, g, b]| ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8));
        out
    }

    pub fn ppm(&self) -> Vec<u8> {
        let mut out = header("P6", self.w, self.h, 255);
        for p in &self.px {
            out.extend_from_slice(p);
        }
        out
    }
}

const MARGIN: i64 = 12;

/// Line chart of several series sharing the x axis (index) and a y range
/// fitted to the data; empty or non-finite series are skipped.
pub fn line_chart(series: &[(&[f64], Rgb)], w: usize, h: usize) -> Canvas {
    let mut c = Canvas::new(w, h);
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, w as i64 - MARGIN, h as i64 - MARGIN);
    c.line((x0, y1), (x1, y1), BLACK);
    c.line((x0, y0), (x0, y1), BLACK);
    let finite = series.iter().flat_map(|(s, _)| s.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return c;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = series.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
    let px = |i: usize| x0 + if n > 1 { (i as i64) * (x1 - x0) / (n as i64 - 1) } else { (x1 - x0) / 2 };
    let py = |v: f64| y1 - ((v - lo) / span * (y1 - y0) as f64).round() as i64;
    for (s, col) in series {
        let pts: Vec<(i64, i64)> = s.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(i, &v)| (px(i), py(v))).collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], *col);
        }
        if let [p] = pts[..] {
            c.set(p.0, p.1, *col);
        }
    }
    c
}

/// Bar chart with one bar per count, scaled to the largest.
pub fn bar_chart(counts: &[u64], bar_w: usize, h: usize) -> Canvas {
    let bar_w = bar_w.max(1);
    let w = counts.len() * bar_w + 2 * MARGIN as usize;
    let mut c = Canvas::new(w, h);
    let base = h as i64 - MARGIN;
    c.line((MARGIN, base), (w as i64 - MARGIN, base), BLACK);
    let max = counts.iter().copied().max().unwrap_or(0).max(1);
    let avail = (h as i64 - 2 * MARGIN) as f64;
    for (i, &n) in counts.iter().enumerate() {
        let top = base - (n as f64 / max as f64 * avail).round() as i64;
        let x = MARGIN + (i * bar_w) as i64;
        c.fill_rect(x, top, x + bar_w as i64, base, BLUE);
    }
    c
}

/// Unit-square curve (e.g. ROC) with the chance diagonal in grey.
pub fn unit_curve(points: &[(f64, f64)], size: usize) -> Canvas {
    let mut c = Canvas::new(size, size);
    let span = (size as i64 - 2 * MARGIN) as f64;
    let map = |(x, y): (f64, f64)| (MARGIN + (x * span).round() as i64, size as i64 - MARGIN - (y * span).round() as i64);
    c.line(map((0.0, 0.0)), map((1.0, 1.0)), GREY);
    c.line(map((0.0, 0.0)), map((1.0, 0.0)), BLACK);
    c.line(map((0.0, 0.0)), map((0.0, 1.0)), BLACK);
    for w in points.windows(2) {
        c.line(map(w[0]), map(w[1]), RED);
    }
    c
}
