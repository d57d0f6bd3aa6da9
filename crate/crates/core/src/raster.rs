//! Netpbm encoders and tiny in-process chart rendering.
//!
//! Images are binary PPM (`P6`) and PGM (`P5`) with maxval 255, so every
//! file is a short ASCII header followed by raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Planar `3 x H x W` floats in `[0,1]` to a `P6` byte stream.
pub fn encode_ppm(planar: &[f64], height: usize, width: usize) -> Vec<u8> {
    let hw = height * width;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            out.push(quantize(planar[c * hw + p]));
        }
    }
    out
}

pub fn encode_pgm(bytes: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&bytes[..height * width]);
    out
}

/// Grey values in `[0,1]` mapped linearly onto `0..=255`.
pub fn encode_pgm_unit(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let bytes: Vec<u8> = values.iter().map(|&v| quantize(v)).collect();
    encode_pgm(&bytes, height, width)
}

/// Parses a binary netpbm file, returning `(magic, width, height, maxval, payload)`.
pub fn decode_netpbm(data: &[u8]) -> Option<(String, usize, usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&data[start..pos]).ok()?.to_string());
    }
    let payload = data.get(pos + 1..)?;
    Some((fields[0].clone(), fields[1].parse().ok()?, fields[2].parse().ok()?, fields[3].parse().ok()?, payload))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// RGB canvas used for the chart renderers.
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Canvas { width, height, pixels: vec![[255; 3]; width * height] }
    }

    pub fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.set(x, y, color);
            }
        }
    }

    /// Bresenham line.
    pub fn line(&mut self, (mut x0, mut y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, color);
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

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }
}

pub const SERIES_COLORS: [[u8; 3]; 6] =
    [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

const MARGIN: i64 = 12;
const AXIS: [u8; 3] = [40, 40, 40];

/// Line chart of several series sharing an x axis (index). Non-finite
/// points are skipped.
pub fn line_chart(series: &[Vec<f64>], width: usize, height: usize) -> Canvas {
    let mut canvas = Canvas::new(width, height);
    let (w, h) = (width as i64, height as i64);
    canvas.line((MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    canvas.line((MARGIN, MARGIN), (MARGIN, h - MARGIN), AXIS);
    let finite = series.iter().flatten().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return canvas;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let len = series.iter().map(Vec::len).max().unwrap_or(0).max(2);
    let px = |i: usize| MARGIN + ((i as f64 / (len - 1) as f64) * (w - 2 * MARGIN) as f64).round() as i64;
    let py = |v: f64| h - MARGIN - (((v - lo) / span) * (h - 2 * MARGIN) as f64).round() as i64;
    for (k, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[k % SERIES_COLORS.len()];
        let mut prev = None;
        for (i, &v) in s.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let pt = (px(i), py(v));
            if let Some(p) = prev {
                canvas.line(p, pt, color);
            }
            prev = Some(pt);
        }
    }
    canvas
}

/// Bars with optional whiskers `(value, min, max)`, values in `[0,1]`.
pub fn bar_chart(bars: &[(f64, f64, f64)], width: usize, height: usize) -> Canvas {
    let mut canvas = Canvas::new(width, height);
    let (w, h) = (width as i64, height as i64);
    canvas.line((MARGIN, h - MARGIN), (w - MARGIN, h - MARGIN), AXIS);
    if bars.is_empty() {
        return canvas;
    }
    let slot = (w - 2 * MARGIN) / bars.len() as i64;
    let py = |v: f64| h - MARGIN - (v.clamp(0.0, 1.0) * (h - 2 * MARGIN) as f64).round() as i64;
    for (k, &(v, lo, hi)) in bars.iter().enumerate() {
        let x0 = MARGIN + k as i64 * slot + slot / 6;
        let x1 = MARGIN + (k as i64 + 1) * slot - slot / 6;
        canvas.fill_rect(x0, py(v), x1, h - MARGIN - 1, SERIES_COLORS[k % SERIES_COLORS.len()]);
        let xm = (x0 + x1) / 2;
        canvas.line((xm, py(lo)), (xm, py(hi)), AXIS);
    }
    canvas
}
