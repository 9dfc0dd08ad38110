//! Minimal raster charts. Numbers behind every chart are written next to
//! it as CSV, so the images carry no text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 30;
const BG: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
pub const PRE: Rgb<u8> = Rgb([150, 150, 150]);
pub const POST: Rgb<u8> = Rgb([31, 119, 180]);

fn canvas() -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, BG);
    for k in 1..5 {
        let y = H - MARGIN - k * (H - 2 * MARGIN) / 5;
        for x in MARGIN..W - MARGIN {
            img.put_pixel(x, y, GRID);
        }
    }
    for x in MARGIN..W - MARGIN {
        img.put_pixel(x, H - MARGIN, AXIS);
    }
    for y in MARGIN..=H - MARGIN {
        img.put_pixel(MARGIN, y, AXIS);
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    img.save(path).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            if x < W && y < H {
                img.put_pixel(x, y, c);
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < W && (py as u32) < H {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn y_of(v: f64, top: f64) -> u32 {
    let span = (H - 2 * MARGIN) as f64;
    let frac = if top > 0.0 { (v / top).clamp(0.0, 1.0) } else { 0.0 };
    H - MARGIN - (frac * span).round() as u32
}

/// Grouped bars: one group per entry, one bar per series value.
pub fn bar_chart(path: &Path, groups: &[Vec<f64>], colors: &[Rgb<u8>]) -> Result<()> {
    let mut img = canvas();
    let top = groups.iter().flatten().cloned().fold(0.0, f64::max) * 1.1;
    let inner = (W - 2 * MARGIN) as f64;
    let slot = inner / groups.len().max(1) as f64;
    for (gi, g) in groups.iter().enumerate() {
        let bw = (slot * 0.8 / g.len().max(1) as f64).max(1.0);
        for (bi, &v) in g.iter().enumerate() {
            let x0 = MARGIN as f64 + gi as f64 * slot + slot * 0.1 + bi as f64 * bw;
            let c = colors[bi % colors.len()];
            fill(&mut img, x0 as u32 + 1, y_of(v, top), (x0 + bw) as u32 - 1, H - MARGIN - 1, c);
        }
    }
    save(&img, path)
}

/// Polyline through `(x, y)` points, x spread by rank.
pub fn line_chart(path: &Path, series: &[(Vec<f64>, Rgb<u8>)]) -> Result<()> {
    let mut img = canvas();
    let top = series.iter().flat_map(|s| s.0.iter()).cloned().fold(0.0, f64::max) * 1.1;
    for (ys, c) in series {
        let n = ys.len().max(2) - 1;
        let px = |i: usize| MARGIN as i64 + 10 + (i as i64 * (W - 2 * MARGIN - 20) as i64) / n as i64;
        for (i, &v) in ys.iter().enumerate() {
            let (x, y) = (px(i), y_of(v, top) as i64);
            fill(&mut img, (x - 3) as u32, (y - 3) as u32, (x + 3) as u32, (y + 3) as u32, *c);
            if i > 0 {
                line(&mut img, (px(i - 1), y_of(ys[i - 1], top) as i64), (x, y), *c);
            }
        }
    }
    save(&img, path)
}

/// Blue (0) to red (1) rendering of a row-major grid in [0, 1].
pub fn heatmap(path: &Path, rows: usize, cols: usize, values: &[f64], cell_px: u32) -> Result<()> {
    let mut img = RgbImage::from_pixel(cols as u32 * cell_px, rows as u32 * cell_px, BG);
    for i in 0..rows {
        for j in 0..cols {
            let v = values[i * cols + j].clamp(0.0, 1.0);
            let c = Rgb([(255.0 * v) as u8, (64.0 * (1.0 - (2.0 * v - 1.0).abs())) as u8, (255.0 * (1.0 - v)) as u8]);
            for y in 0..cell_px {
                for x in 0..cell_px {
                    img.put_pixel(j as u32 * cell_px + x, i as u32 * cell_px + y, c);
                }
            }
        }
    }
    save(&img, path)
}
