//! Plain raster charts: bar histograms, bubble rings and box plots.
//! Values only; labels live in the accompanying JSON.

use image::{Rgb, RgbImage};

use crate::explanation::ClassConcepts;
use crate::percept_study::SensitivityReport;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

pub fn palette(i: usize) -> Rgb<u8> {
    PALETTE[i % PALETTE.len()]
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, color: Rgb<u8>) {
    fill_rect(img, x0.min(x1), y, x0.max(x1) + 1, y + 1, color);
}

fn vline(img: &mut RgbImage, x: i64, y0: i64, y1: i64, color: Rgb<u8>) {
    fill_rect(img, x, y0.min(y1), x + 1, y0.max(y1) + 1, color);
}

fn fill_circle(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    for y in y0.max(0)..=y1.min(h - 1) {
        for x in x0.max(0)..=x1.min(w - 1) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

/// Vertical bars on a shared zero baseline; negative values hang below it.
pub fn bar_chart(values: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let n = values.len().max(1) as f64;
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let margin = 10.0;
    let plot_h = height as f64 - 2.0 * margin;
    let to_y = |v: f64| (margin + (hi - v) / span * plot_h).round() as i64;
    let base = to_y(0.0);
    let slot = (width as f64 - 2.0 * margin) / n;
    for (i, &v) in values.iter().enumerate() {
        let x0 = (margin + i as f64 * slot + 0.15 * slot).round() as i64;
        let x1 = (margin + (i + 1) as f64 * slot - 0.15 * slot).round() as i64;
        let y = to_y(v);
        fill_rect(&mut img, x0, y.min(base), x1, y.max(base) + 1, palette(i));
    }
    hline(&mut img, margin as i64, width as i64 - margin as i64, base, AXIS);
    img
}

/// Two concentric rings, one per candidate class; bubble area follows each
/// concept's PCS. Concepts share an angle and a colour across rings.
pub fn bubble_ring(ring: &[ClassConcepts], size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, WHITE);
    let c = size as f64 / 2.0;
    let concepts: Vec<&String> = ring.first().map(|r| r.concepts.keys().collect()).unwrap_or_default();
    let max_pcs = ring
        .iter()
        .flat_map(|r| r.concepts.values().map(|s| s.pcs))
        .fold(0.0f64, f64::max);
    let n = concepts.len().max(1) as f64;
    let max_r = size as f64 / 10.0;
    for (ri, class) in ring.iter().take(2).enumerate() {
        let radius = size as f64 * if ri == 0 { 0.18 } else { 0.38 };
        for (k, name) in concepts.iter().enumerate() {
            let pcs = class.concepts.get(*name).map_or(0.0, |s| s.pcs);
            let theta = std::f64::consts::TAU * k as f64 / n - std::f64::consts::FRAC_PI_2;
            let (x, y) = (c + radius * theta.cos(), c + radius * theta.sin());
            let r = if max_pcs > 0.0 { max_r * (pcs / max_pcs).max(0.0).sqrt() } else { 0.0 };
            fill_circle(&mut img, x, y, r.max(1.5), palette(k));
        }
    }
    fill_circle(&mut img, c, c, 3.0, AXIS);
    img
}

/// One box per (concept, domain) cell, grouped by concept, coloured by domain.
pub fn box_plot(report: &SensitivityReport, width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, WHITE);
    let cells = &report.cells;
    if cells.is_empty() {
        return img;
    }
    let hi = cells.iter().map(|c| c.stats.whisker_high).fold(0.0f64, f64::max);
    let lo = cells.iter().map(|c| c.stats.whisker_low).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let margin = 10.0;
    let plot_h = height as f64 - 2.0 * margin;
    let to_y = |v: f64| (margin + (hi - v) / span * plot_h).round() as i64;
    let slot = (width as f64 - 2.0 * margin) / cells.len() as f64;
    hline(&mut img, margin as i64, width as i64 - margin as i64, to_y(0.0), Rgb([180, 180, 180]));
    for (i, cell) in cells.iter().enumerate() {
        let s = &cell.stats;
        let color = palette(cell.domain as usize);
        let cx = (margin + (i as f64 + 0.5) * slot).round() as i64;
        let half = (0.3 * slot).max(1.0).round() as i64;
        vline(&mut img, cx, to_y(s.whisker_low), to_y(s.q1), AXIS);
        vline(&mut img, cx, to_y(s.q3), to_y(s.whisker_high), AXIS);
        hline(&mut img, cx - half / 2, cx + half / 2, to_y(s.whisker_low), AXIS);
        hline(&mut img, cx - half / 2, cx + half / 2, to_y(s.whisker_high), AXIS);
        fill_rect(&mut img, cx - half, to_y(s.q3), cx + half + 1, to_y(s.q1) + 1, color);
        hline(&mut img, cx - half, cx + half, to_y(s.median), AXIS);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_land_on_both_sides_of_the_baseline() {
        let img = bar_chart(&[1.0, -1.0], 100, 60);
        assert_eq!(img.dimensions(), (100, 60));
        let col = |x: u32| (0..60).filter(|&y| *img.get_pixel(x, y) == palette(x as usize / 50)).collect::<Vec<_>>();
        let (a, b) = (col(30), col(70));
        assert!(!a.is_empty() && !b.is_empty());
        assert!(a.iter().max() < b.iter().max());
    }
}
