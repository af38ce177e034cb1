//! Seeded synthetic image classes for desk-scale runs.
//!
//! Class `k` of `n` draws oriented stripes at angle `k * pi / n` tinted with
//! hue `k / n`, plus one bright blob at a random position. Images are drawn at
//! 32x32 and upscaled to the model input size.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{resize_to_input, Dataset, Sample};
use crate::error::{Error, Result};

pub const TOY_SIDE: u32 = 32;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One 32x32 toy image of `class` out of `num_classes`.
pub fn toy_image(class: usize, num_classes: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = class as f64 * std::f64::consts::PI / num_classes as f64 + rng.random_range(-0.15..0.15);
    let hue = class as f64 / num_classes as f64 + rng.random_range(-0.04..0.04);
    let period: f64 = rng.random_range(4.0..8.0);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (bx, by) = (rng.random_range(6.0..26.0), rng.random_range(6.0..26.0));
    let radius: f64 = rng.random_range(2.5..5.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let side = TOY_SIDE;
    let mut img = RgbImage::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let (xf, yf) = (x as f64, y as f64);
            let t = (xf * ca + yf * sa) * std::f64::consts::TAU / period + phase;
            let stripe = 0.5 + 0.5 * t.sin();
            let mut rgb = hsv_to_rgb(hue, 0.8, 0.25 + 0.7 * stripe);
            let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
            if d2 < radius * radius {
                rgb = hsv_to_rgb(hue + 0.5, 0.6, 0.95);
            }
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let noise: f64 = rng.random_range(-0.06..0.06);
                *p = ((rgb[c] + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes).map(|k| format!("class_{k}")).collect()
}

/// `per_class` upscaled toy images for each of `num_classes` classes.
pub fn toy_dataset(num_classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        for i in 0..per_class {
            let id = samples.len();
            let small = toy_image(class, num_classes, seed.wrapping_mul(1_000_003).wrapping_add(id as u64));
            samples.push(Sample {
                id,
                label: class,
                source: format!("toy/{class}/{i}"),
                image: resize_to_input(&small),
            });
        }
    }
    Dataset::new(class_names(num_classes), samples)
}

/// Writes the toy set as a folder-per-class directory of 32x32 PNGs.
pub fn write_toy_dataset(dir: &Path, num_classes: usize, per_class: usize, seed: u64) -> Result<()> {
    for (class, name) in class_names(num_classes).iter().enumerate() {
        let class_dir = dir.join(name);
        std::fs::create_dir_all(&class_dir).map_err(|e| Error::io(&class_dir, e))?;
        for i in 0..per_class {
            let id = class * per_class + i;
            let img = toy_image(class, num_classes, seed.wrapping_mul(1_000_003).wrapping_add(id as u64));
            let path = class_dir.join(format!("{i:04}.png"));
            img.save(&path).map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}
