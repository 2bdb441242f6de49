//! Minimal PNG line plots for calibration traces. One polyline per series
//! over a framed canvas; enough to eyeball convergence without pulling in a
//! plotting stack.

use crate::error::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

pub struct Series<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
    pub color: [u8; 3],
}

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)).round() as i64;
        let y = (y0 + t * (y1 - y0)).round() as i64;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Render series over a common index axis and write a PNG.
pub fn line_chart(path: &Path, width: u32, height: u32, series: &[Series]) -> Result<()> {
    let margin = 20u32;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut max_len = 1usize;
    for s in series {
        for &v in s.values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        max_len = max_len.max(s.values.len());
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }

    let plot_w = (width - 2 * margin) as f64;
    let plot_h = (height - 2 * margin) as f64;
    let to_x = |i: usize| margin as f64 + plot_w * i as f64 / (max_len.max(2) - 1) as f64;
    let to_y = |v: f64| margin as f64 + plot_h * (1.0 - (v - lo) / (hi - lo));

    // frame
    let frame = [60, 60, 60];
    draw_line(&mut img, margin as f64, margin as f64, (width - margin) as f64, margin as f64, frame);
    draw_line(&mut img, margin as f64, (height - margin) as f64, (width - margin) as f64, (height - margin) as f64, frame);
    draw_line(&mut img, margin as f64, margin as f64, margin as f64, (height - margin) as f64, frame);
    draw_line(&mut img, (width - margin) as f64, margin as f64, (width - margin) as f64, (height - margin) as f64, frame);

    for s in series {
        for w in s.values.windows(2).enumerate() {
            let (i, pair) = w;
            if pair[0].is_finite() && pair[1].is_finite() {
                draw_line(&mut img, to_x(i), to_y(pair[0]), to_x(i + 1), to_y(pair[1]), s.color);
            }
        }
    }

    img.save(path)
        .map_err(|e| crate::error::Error::Config(format!("cannot write plot: {e}")))?;
    Ok(())
}
