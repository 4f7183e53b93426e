//! Minimal raster line plot of translation-error CDFs.

use image::{Rgb, RgbImage};
use rcloc::bench::AblationReport;

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: u32 = 40;
/// Upper end of the error axis, metres.
const MAX_ERROR: f64 = 2.0;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
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

/// One staircase per cell: fraction of queries with translation error below x,
/// x from 0 to 2 m. Failed queries never count. Colours cycle per cell in grid order.
pub fn plot_cdf(report: &AblationReport) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, y0, x1, y1) = (MARGIN as i64, (H - MARGIN) as i64, (W - MARGIN) as i64, MARGIN as i64);
    let to_px = |e: f64, f: f64| {
        let x = x0 as f64 + (e / MAX_ERROR).clamp(0.0, 1.0) * (x1 - x0) as f64;
        let y = y0 as f64 - f.clamp(0.0, 1.0) * (y0 - y1) as f64;
        (x.round() as i64, y.round() as i64)
    };
    for i in 0..=4 {
        let (_, y) = to_px(0.0, i as f64 / 4.0);
        line(&mut img, (x0, y), (x1, y), [225, 225, 225]);
    }
    line(&mut img, (x0, y0), (x1, y0), [0, 0, 0]);
    line(&mut img, (x0, y0), (x0, y1), [0, 0, 0]);
    for (ci, cell) in report.cells.iter().enumerate() {
        let n = cell.outcomes.len().max(1) as f64;
        let mut errs: Vec<f64> = cell
            .outcomes
            .iter()
            .filter_map(|o| o.error.map(|e| e.translation))
            .collect();
        errs.sort_by(f64::total_cmp);
        let c = PALETTE[ci % PALETTE.len()];
        let mut prev = to_px(0.0, 0.0);
        for (i, e) in errs.iter().enumerate() {
            let step = to_px(*e, i as f64 / n);
            let up = to_px(*e, (i + 1) as f64 / n);
            line(&mut img, prev, step, c);
            line(&mut img, step, up, c);
            prev = up;
        }
        let end = to_px(MAX_ERROR, errs.len() as f64 / n);
        line(&mut img, prev, (end.0, prev.1), c);
    }
    img
}
