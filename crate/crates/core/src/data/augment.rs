use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::proto_model::INPUT_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Augmented copies added per source image.
    pub copies: usize,
    pub max_rotation_deg: f64,
    pub max_shear: f64,
    /// Maximum perspective coefficient.
    pub max_skew: f64,
    /// Amplitude of the smooth random displacement, as a fraction of the image side.
    pub distortion: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            copies: 1,
            max_rotation_deg: 15.0,
            max_shear: 0.15,
            max_skew: 0.1,
            distortion: 0.02,
        }
    }
}

pub fn resize_to_input(img: &RgbImage) -> RgbImage {
    let n = INPUT_SIZE as u32;
    if img.dimensions() == (n, n) {
        return img.clone();
    }
    imageops::resize(img, n, n, imageops::FilterType::Triangle)
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let p = |xx, yy| img.get_pixel(xx, yy)[c] as f64;
        let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
        let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
        *o = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Random rotation, shear, perspective skew and smooth distortion, then a
/// resize to `224 x 224`. With augmentation disabled this is a plain resize.
pub fn augment(img: &RgbImage, cfg: &AugmentConfig, seed: u64) -> RgbImage {
    if !cfg.enabled {
        return resize_to_input(img);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let theta = sym(cfg.max_rotation_deg).to_radians();
    let shear = sym(cfg.max_shear);
    let skew_x = sym(cfg.max_skew);
    let skew_y = sym(cfg.max_skew);
    // 3x3 grid of displacement control points, bilinearly interpolated
    let mut grid = [[(0.0, 0.0); 3]; 3];
    for row in grid.iter_mut() {
        for cell in row.iter_mut() {
            *cell = (sym(cfg.distortion), sym(cfg.distortion));
        }
    }
    let (sw, sh) = img.dimensions();
    let n = INPUT_SIZE as u32;
    let (cos, sin) = (theta.cos(), theta.sin());
    RgbImage::from_fn(n, n, |ox, oy| {
        // normalized output coordinates in [-1, 1]
        let u = 2.0 * (ox as f64 + 0.5) / n as f64 - 1.0;
        let v = 2.0 * (oy as f64 + 0.5) / n as f64 - 1.0;
        let gx = u + 1.0;
        let gy = v + 1.0;
        let (i, j) = ((gx.floor() as usize).min(1), (gy.floor() as usize).min(1));
        let (fx, fy) = (gx - i as f64, gy - j as f64);
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(grid[j][i], grid[j][i + 1], fx);
        let bottom = lerp(grid[j + 1][i], grid[j + 1][i + 1], fx);
        let d = lerp(top, bottom, fy);
        let (u, v) = (u + 2.0 * d.0, v + 2.0 * d.1);
        let denom = 1.0 + skew_x * u + skew_y * v;
        let (u, v) = (u / denom, v / denom);
        let (u, v) = (u + shear * v, v);
        let (u, v) = (cos * u - sin * v, sin * u + cos * v);
        let sx = (u + 1.0) * 0.5 * sw as f64 - 0.5;
        let sy = (v + 1.0) * 0.5 * sh as f64 - 0.5;
        sample_bilinear(img, sx, sy)
    })
}
