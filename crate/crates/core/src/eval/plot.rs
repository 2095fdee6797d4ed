//! Minimal PNG rendering for evaluation artifacts. No axes machinery, just
//! framed data boxes with polylines or scatter points; the numeric artifact
//! files are the source of truth.

use crate::error::{Error, Result};
use image::{Rgb, RgbImage};
use std::path::Path;

pub type Color = Rgb<u8>;

pub const RED: Color = Rgb([200, 40, 40]);
pub const BLUE: Color = Rgb([40, 70, 200]);

const MARGIN: u32 = 12;

fn bbox(series: &[(Color, Vec<(f64, f64)>)]) -> (f64, f64, f64, f64) {
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let pad = |a: f64, b: f64| if a == b { (a - 0.5, b + 0.5) } else { (a, b) };
        let (min_x, max_x) = pad(min_x, max_x);
        let (min_y, max_y) = pad(min_y, max_y);
        (min_x, max_x, min_y, max_y)
    }
}

fn to_pixel(
    (x, y): (f64, f64),
    (min_x, max_x, min_y, max_y): (f64, f64, f64, f64),
    width: u32,
    height: u32,
) -> (i64, i64) {
    let px = MARGIN as f64
        + (x - min_x) / (max_x - min_x) * (width - 2 * MARGIN) as f64;
    let py = (height - MARGIN) as f64
        - (y - min_y) / (max_y - min_y) * (height - 2 * MARGIN) as f64;
    (px.round() as i64, py.round() as i64)
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Color) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn blank(width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let frame = Rgb([150, 150, 150]);
    for x in 0..width {
        img.put_pixel(x, 0, frame);
        img.put_pixel(x, height - 1, frame);
    }
    for y in 0..height {
        img.put_pixel(0, y, frame);
        img.put_pixel(width - 1, y, frame);
    }
    img
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

/// Overlaid polylines sharing one coordinate box.
pub fn line_chart(path: &Path, width: u32, height: u32, series: &[(Color, Vec<(f64, f64)>)]) -> Result<()> {
    let mut img = blank(width, height);
    let bb = bbox(series);
    for (color, pts) in series {
        for w in pts.windows(2) {
            let (x0, y0) = to_pixel(w[0], bb, width, height);
            let (x1, y1) = to_pixel(w[1], bb, width, height);
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for i in 0..=steps {
                let t = i as f64 / steps as f64;
                let x = x0 + ((x1 - x0) as f64 * t).round() as i64;
                let y = y0 + ((y1 - y0) as f64 * t).round() as i64;
                put(&mut img, x, y, *color);
            }
        }
    }
    save(&img, path)
}

/// Colored point clouds sharing one coordinate box.
pub fn scatter(path: &Path, width: u32, height: u32, groups: &[(Color, Vec<(f64, f64)>)]) -> Result<()> {
    let mut img = blank(width, height);
    let bb = bbox(groups);
    for (color, pts) in groups {
        for &p in pts {
            let (x, y) = to_pixel(p, bb, width, height);
            for dx in -1i64..=1 {
                for dy in -1i64..=1 {
                    put(&mut img, x + dx, y + dy, *color);
                }
            }
        }
    }
    save(&img, path)
}
