//! Static PNG renderings of evaluation outputs. The numbers behind every
//! picture are written alongside it as CSV or JSON.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{CliError, CliResult};

/// Tableau-like categorical colors.
const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

fn save(img: &RgbImage, path: &Path) -> CliResult<()> {
    img.save(path).map_err(|e| CliError::output(path, e))
}

fn disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (x, y) = (cx + dx, cy + dy);
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, c);
            }
        }
    }
}

/// Scatter plot of 2-D points, one color per category id.
pub fn scatter(points: &[[f64; 2]], categories: &[usize], path: &Path) -> CliResult<()> {
    const SIDE: u32 = 512;
    const MARGIN: f64 = 16.0;
    let mut img = RgbImage::from_pixel(SIDE, SIDE, Rgb([255, 255, 255]));
    let bounds = |a: usize| {
        points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[a]), hi.max(p[a]))
        })
    };
    let (x0, x1) = bounds(0);
    let (y0, y1) = bounds(1);
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (SIDE as f64 - 2.0 * MARGIN) / span;
    for (p, &c) in points.iter().zip(categories) {
        let x = MARGIN + (p[0] - x0) * scale;
        let y = SIDE as f64 - MARGIN - (p[1] - y0) * scale;
        disc(&mut img, x.round() as i64, y.round() as i64, 3, color(c));
    }
    save(&img, path)
}

/// 2×2 confusion matrix as shaded cells (darker = more slides), truth on rows.
pub fn confusion(counts: &[[usize; 2]; 2], path: &Path) -> CliResult<()> {
    const CELL: u32 = 96;
    let max = counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = RgbImage::new(2 * CELL, 2 * CELL);
    for (t, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            let shade = 1.0 - 0.85 * n as f64 / max;
            let c = Rgb([(255.0 * shade) as u8, (255.0 * shade) as u8, 255]);
            for y in 0..CELL {
                for x in 0..CELL {
                    let edge = x == 0 || y == 0 || x == CELL - 1 || y == CELL - 1;
                    img.put_pixel(p as u32 * CELL + x, t as u32 * CELL + y, if edge { Rgb([0, 0, 0]) } else { c });
                }
            }
        }
    }
    save(&img, path)
}

/// One row per slide, one cell per patch, colored by component id.
pub fn cluster_map(rows: &[Vec<usize>], path: &Path) -> CliResult<()> {
    const CELL: u32 = 8;
    let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1) as u32;
    let height = rows.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(width * CELL, height * CELL, Rgb([255, 255, 255]));
    for (r, ids) in rows.iter().enumerate() {
        for (c, &id) in ids.iter().enumerate() {
            for y in 0..CELL - 1 {
                for x in 0..CELL - 1 {
                    img.put_pixel(c as u32 * CELL + x, r as u32 * CELL + y, color(id));
                }
            }
        }
    }
    save(&img, path)
}
