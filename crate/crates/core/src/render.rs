// SPDX-License-Identifier: MIT OR Apache-2.0

//! Raster figures: saliency grids and intervention curves.
//!
//! Output is a pure function of the inputs; no fonts or timestamps are drawn.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{CbmError, Result};

/// One grid row: the input, one map per category, and the group aggregate.
#[derive(Clone, Debug)]
pub struct SaliencyGridRow {
    pub input: Array1<f64>,
    pub maps: Vec<Array1<f64>>,
    pub aggregate: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridLayout {
    /// `(height, width)` each vector is reshaped to; `(1, len)` when absent.
    pub image_shape: Option<(usize, usize)>,
    /// Side of one element in pixels.
    pub pixel_scale: u32,
    /// White gap between cells in pixels.
    pub gap: u32,
}

impl Default for GridLayout {
    fn default() -> Self {
        Self {
            image_shape: None,
            pixel_scale: 8,
            gap: 4,
        }
    }
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);

fn gray(v: f64, lo: f64, hi: f64) -> Rgb<u8> {
    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
    let c = (t.clamp(0.0, 1.0) * 255.0).round() as u8;
    Rgb([c, c, c])
}

/// Blue for negative, red for positive, white at zero; `scale` maps to full colour.
fn diverging(v: f64, scale: f64) -> Rgb<u8> {
    if scale <= 0.0 {
        return WHITE;
    }
    let t = (v / scale).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        Rgb([255, fade, fade])
    } else {
        Rgb([fade, fade, 255])
    }
}

/// Grid with the input in the first column, per-category maps next and the
/// aggregate last. Every row must have the same number of maps and every
/// vector the same length.
pub fn render_saliency_grid(rows: &[SaliencyGridRow], layout: &GridLayout) -> Result<RgbImage> {
    let first = rows
        .first()
        .ok_or_else(|| CbmError::Invalid("saliency grid needs at least one row".into()))?;
    if first.maps.is_empty() {
        return Err(CbmError::Invalid("saliency grid needs at least one map per row".into()));
    }
    if layout.pixel_scale == 0 {
        return Err(CbmError::config("layout.pixel_scale", "must be >= 1"));
    }
    let len = first.input.len();
    let (h, w) = layout.image_shape.unwrap_or((1, len));
    if h * w != len || len == 0 {
        return Err(CbmError::DimensionMismatch {
            expected: h * w,
            actual: len,
            context: "saliency grid image shape".into(),
        });
    }
    for r in rows {
        if r.maps.len() != first.maps.len() {
            return Err(CbmError::DimensionMismatch {
                expected: first.maps.len(),
                actual: r.maps.len(),
                context: "maps per grid row".into(),
            });
        }
        for v in std::iter::once(&r.input).chain(&r.maps).chain(std::iter::once(&r.aggregate)) {
            if v.len() != len {
                return Err(CbmError::DimensionMismatch {
                    expected: len,
                    actual: v.len(),
                    context: "saliency grid vector length".into(),
                });
            }
        }
    }
    let cols = first.maps.len() + 2;
    let s = layout.pixel_scale;
    let (cell_w, cell_h) = (w as u32 * s, h as u32 * s);
    let g = layout.gap;
    let width = cols as u32 * cell_w + (cols as u32 + 1) * g;
    let height = rows.len() as u32 * cell_h + (rows.len() as u32 + 1) * g;
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let mut paint = |row: usize, col: usize, colour: &dyn Fn(usize) -> Rgb<u8>| {
        let x0 = g + col as u32 * (cell_w + g);
        let y0 = g + row as u32 * (cell_h + g);
        for i in 0..len {
            let (py, px) = ((i / w) as u32, (i % w) as u32);
            let c = colour(i);
            for dy in 0..s {
                for dx in 0..s {
                    img.put_pixel(x0 + px * s + dx, y0 + py * s + dy, c);
                }
            }
        }
    };
    for (ri, r) in rows.iter().enumerate() {
        let lo = r.input.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.input.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        paint(ri, 0, &|i| gray(r.input[i], lo, hi));
        for (ci, m) in r.maps.iter().chain(std::iter::once(&r.aggregate)).enumerate() {
            let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            paint(ri, ci + 1, &|i| diverging(m[i], scale));
        }
    }
    Ok(img)
}

/// A labelled error curve; points are `(m, error)`.
#[derive(Clone, Debug)]
pub struct CurveSeries {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
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

/// Line plot of error against number of intervened groups, y axis from 0 to
/// the largest error. Series colours follow their order.
pub fn render_intervention_curves(series: &[CurveSeries], width: u32, height: u32) -> Result<RgbImage> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(CbmError::Invalid("intervention plot needs non-empty series".into()));
    }
    if width < 64 || height < 64 {
        return Err(CbmError::Invalid("intervention plot must be at least 64x64".into()));
    }
    let pts = series.iter().flat_map(|s| s.points.iter());
    let x_max = pts.clone().map(|p| p.0).fold(0.0f64, f64::max).max(1.0);
    let y_max = pts.map(|p| p.1).filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let margin = 24i64;
    let (w, h) = (width as i64, height as i64);
    let to_px = |(x, y): (f64, f64)| {
        let px = margin + ((x / x_max) * (w - 2 * margin) as f64).round() as i64;
        let py = h - margin - ((y / y_max) * (h - 2 * margin) as f64).round() as i64;
        (px, py)
    };
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (margin, h - margin), (w - margin, h - margin), axis);
    line(&mut img, (margin, margin), (margin, h - margin), axis);
    let ticks = x_max.round() as i64;
    for t in 0..=ticks {
        let (px, py) = to_px((t as f64, 0.0));
        line(&mut img, (px, py), (px, py + 4), axis);
    }
    for (si, s) in series.iter().enumerate() {
        let c = PALETTE[si % PALETTE.len()];
        let px: Vec<(i64, i64)> = s.points.iter().map(|&p| to_px(p)).collect();
        for pair in px.windows(2) {
            line(&mut img, pair[0], pair[1], c);
        }
        for &(x, y) in &px {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    line(&mut img, (x + dx, y + dy), (x + dx, y + dy), c);
                }
            }
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CbmError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| CbmError::format(path, e))
}
