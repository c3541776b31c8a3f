//! Minimal raster line plots for loss curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];
const MARGIN: u32 = 12;

/// Draws each series as a polyline on a shared linear scale (x = index) and saves a PNG.
/// Non-finite values are skipped.
pub fn plot_series(path: &Path, series: &[&[f64]], width: u32, height: u32) -> Result<()> {
    if width <= 2 * MARGIN || height <= 2 * MARGIN {
        return Err(Error::invalid("plot is too small"));
    }
    let finite = series.iter().flat_map(|s| s.iter()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let n = series.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (pw, ph) = (width - 2 * MARGIN, height - 2 * MARGIN);
    for x in MARGIN..=MARGIN + pw {
        img.put_pixel(x, MARGIN + ph, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=MARGIN + ph {
        img.put_pixel(MARGIN, y, Rgb([0, 0, 0]));
    }
    if n >= 2 && lo.is_finite() {
        let span = if hi > lo { hi - lo } else { 1.0 };
        let to_px = |i: usize, v: f64| -> (f64, f64) {
            let x = MARGIN as f64 + pw as f64 * i as f64 / (n - 1) as f64;
            let y = MARGIN as f64 + ph as f64 * (1.0 - (v - lo) / span);
            (x, y)
        };
        for (si, s) in series.iter().enumerate() {
            let color = Rgb(PALETTE[si % PALETTE.len()]);
            let mut prev: Option<(f64, f64)> = None;
            for (i, &v) in s.iter().enumerate() {
                if !v.is_finite() {
                    prev = None;
                    continue;
                }
                let p = to_px(i, v);
                if let Some(q) = prev {
                    draw_line(&mut img, q, p, color);
                } else {
                    img.put_pixel(p.0.round() as u32, p.1.round() as u32, color);
                }
                prev = Some(p);
            }
        }
    }
    img.save(path)?;
    Ok(())
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let f = k as f64 / steps as f64;
        let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        let (x, y) = (x.round() as u32, y.round() as u32);
        if x < img.width() && y < img.height() {
            img.put_pixel(x, y, color);
        }
    }
}
