//! Feature inversion with total-variation regularization, and salient-region masks.

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::proto_model::{chw_to_patches, patches_to_chw, Conv2d, ProtoModel, INPUT_SIZE};
use crate::util::quantile_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub lambda_tv: f64,
    pub beta: f64,
    pub iterations: usize,
    /// Objective is logged every this many iterations.
    pub log_every: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            lambda_tv: 0.01,
            beta: 0.05,
            iterations: 4000,
            log_every: 100,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.beta > 0.0 && self.beta.is_finite(), || format!("beta must be > 0, got {}", self.beta))?;
        ensure(self.iterations >= 1, || "iterations must be >= 1".into())?;
        ensure(self.lambda_tv >= 0.0 && self.lambda_tv.is_finite(), || {
            format!("lambda_tv must be >= 0, got {}", self.lambda_tv)
        })?;
        ensure(self.log_every >= 1, || "log_every must be >= 1".into())
    }
}

/// Forward differences with replicate boundary (the last difference along each axis is 0).
fn differences(z: &Array3<f64>, c: usize, y: usize, x: usize) -> (f64, f64) {
    let (_, h, w) = z.dim();
    let v = z[[c, y, x]];
    let dx = if x + 1 < w { z[[c, y, x + 1]] - v } else { 0.0 };
    let dy = if y + 1 < h { z[[c, y + 1, x]] - v } else { 0.0 };
    (dx, dy)
}

/// Mean over pixels of `sqrt(dx^2 + dy^2)`, i.e. the summed magnitude divided by `C*H*W`.
pub fn tv_norm(z: &Array3<f64>) -> f64 {
    let (c, h, w) = z.dim();
    let mut total = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = differences(z, ch, y, x);
                total += (dx * dx + dy * dy).sqrt();
            }
        }
    }
    total / (c * h * w) as f64
}

/// Gradient of [`tv_norm`]; zero-magnitude pixels contribute the zero subgradient.
pub fn tv_grad(z: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = z.dim();
    let scale = 1.0 / (c * h * w) as f64;
    let mut g = Array3::zeros(z.dim());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = differences(z, ch, y, x);
                let m = (dx * dx + dy * dy).sqrt();
                if m == 0.0 {
                    continue;
                }
                let (gx, gy) = (dx / m * scale, dy / m * scale);
                g[[ch, y, x]] -= gx + gy;
                if x + 1 < w {
                    g[[ch, y, x + 1]] += gx;
                }
                if y + 1 < h {
                    g[[ch, y + 1, x]] += gy;
                }
            }
        }
    }
    g
}

/// A differentiable map from an image-like tensor to features.
pub trait FeatureLayer {
    fn input_shape(&self) -> (usize, usize, usize);
    fn forward(&self, z: &Array3<f64>) -> Array3<f64>;
    /// Vector-Jacobian product at `z`.
    fn backward(&self, z: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64>;
}

pub struct Identity {
    pub shape: (usize, usize, usize),
}

impl FeatureLayer for Identity {
    fn input_shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    fn forward(&self, z: &Array3<f64>) -> Array3<f64> {
        z.clone()
    }

    fn backward(&self, _z: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
        grad_out.clone()
    }
}

/// One convolution followed by ReLU.
pub struct ConvRelu {
    pub conv: Conv2d,
    pub input_hw: (usize, usize),
}

impl FeatureLayer for ConvRelu {
    fn input_shape(&self) -> (usize, usize, usize) {
        (self.conv.in_channels(), self.input_hw.0, self.input_hw.1)
    }

    fn forward(&self, z: &Array3<f64>) -> Array3<f64> {
        self.conv.forward(z).mapv(|v| v.max(0.0))
    }

    fn backward(&self, z: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
        let pre = self.conv.forward(z);
        let masked = grad_out * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        self.conv.backward(z, &masked).input
    }
}

/// The add-on (similarity-input) features of a model, `[D, 7, 7]` from a `[3, 224, 224]` image.
pub struct AddOnFeatures<'m> {
    pub model: &'m ProtoModel,
}

impl FeatureLayer for AddOnFeatures<'_> {
    fn input_shape(&self) -> (usize, usize, usize) {
        (3, INPUT_SIZE, INPUT_SIZE)
    }

    fn forward(&self, z: &Array3<f64>) -> Array3<f64> {
        let b = self.model.backbone.forward(z);
        let (_, h, w) = b.dim();
        patches_to_chw(&self.model.addon.forward(&chw_to_patches(&b)).output, h, w)
    }

    fn backward(&self, z: &Array3<f64>, grad_out: &Array3<f64>) -> Array3<f64> {
        let trace = self.model.backbone.forward_trace(z);
        let b = trace.activations.last().expect("non-empty");
        let (_, h, w) = b.dim();
        let cache = self.model.addon.forward(&chw_to_patches(b));
        let (_, dx) = self.model.addon.backward(&cache, &chw_to_patches(grad_out));
        self.model.backbone.backward(&trace, &patches_to_chw(&dx, h, w)).input
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionLogEntry {
    pub iteration: usize,
    pub objective: f64,
    pub feature_loss: f64,
    pub tv: f64,
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub image: Array3<f64>,
    pub log: Vec<InversionLogEntry>,
    /// Iteration at which the objective became non-finite; `image` is the last finite iterate.
    pub diverged_at: Option<usize>,
}

impl Inversion {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.log {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

fn evaluate(layer: &dyn FeatureLayer, z: &Array3<f64>, target: &Array3<f64>, lambda: f64) -> (InversionLogEntry, Array3<f64>) {
    let diff = layer.forward(z) - target;
    let feature_loss = diff.iter().map(|v| v * v).sum::<f64>();
    let tv = tv_norm(z);
    let entry = InversionLogEntry {
        iteration: 0,
        objective: feature_loss + lambda * tv,
        feature_loss,
        tv,
    };
    (entry, diff)
}

/// Gradient descent on `||phi(z) - target||^2 + lambda * tv(z)` from the zero image.
pub fn invert_features(target: &Array3<f64>, layer: &dyn FeatureLayer, cfg: &InversionConfig) -> Result<Inversion> {
    cfg.validate()?;
    if target.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("inversion target".into()));
    }
    let shape = layer.input_shape();
    let mut z = Array3::<f64>::zeros(shape);
    let out_dim = layer.forward(&z).dim();
    if out_dim != target.dim() {
        return Err(Error::Dimension(format!(
            "layer produces {out_dim:?}, target is {:?}",
            target.dim()
        )));
    }
    let mut log = Vec::new();
    for it in 0..=cfg.iterations {
        let (mut entry, diff) = evaluate(layer, &z, target, cfg.lambda_tv);
        entry.iteration = it;
        if !entry.objective.is_finite() {
            log::warn!("inversion objective became non-finite at iteration {it}; stopping");
            return Ok(Inversion {
                image: z,
                log,
                diverged_at: Some(it),
            });
        }
        if it % cfg.log_every == 0 || it == cfg.iterations {
            log::debug!("inversion {it}: objective {:.6}", entry.objective);
            log.push(entry);
        }
        if it == cfg.iterations {
            break;
        }
        let mut grad = layer.backward(&z, &(diff * 2.0));
        if cfg.lambda_tv > 0.0 {
            grad = grad + tv_grad(&z) * cfg.lambda_tv;
        }
        let next = &z - &(grad * cfg.beta);
        if next.iter().any(|v| !v.is_finite()) {
            log::warn!("inversion iterate became non-finite at iteration {}; stopping", it + 1);
            return Ok(Inversion {
                image: z,
                log,
                diverged_at: Some(it + 1),
            });
        }
        z = next;
    }
    Ok(Inversion {
        image: z,
        log,
        diverged_at: None,
    })
}

/// Bilinear resize of a 2-D map with pixel-center alignment.
pub fn upsample_bilinear(map: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SalientMask {
    pub mask: Array2<bool>,
    pub threshold: f64,
}

impl SalientMask {
    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Upsamples a similarity map to the input size and keeps values at or above
/// its `threshold_pct` percentile. A constant map gives an empty mask.
pub fn salient_region_mask(simmap: ArrayView2<f64>, threshold_pct: f64) -> Result<SalientMask> {
    ensure((0.0..100.0).contains(&threshold_pct), || {
        format!("threshold percentile must be in [0, 100), got {threshold_pct}")
    })?;
    ensure(simmap.nrows() >= 1 && simmap.ncols() >= 1, || "empty similarity map".into())?;
    if simmap.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity map".into()));
    }
    let up = upsample_bilinear(simmap, INPUT_SIZE, INPUT_SIZE);
    let first = simmap[[0, 0]];
    if simmap.iter().all(|&v| v == first) {
        log::warn!("constant similarity map; salient mask is empty");
        return Ok(SalientMask {
            mask: Array2::from_elem(up.dim(), false),
            threshold: first,
        });
    }
    let mut sorted: Vec<f64> = up.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let threshold = quantile_sorted(&sorted, threshold_pct / 100.0);
    Ok(SalientMask {
        mask: up.mapv(|v| v >= threshold),
        threshold,
    })
}

/// Tints masked pixels red.
pub fn overlay_mask(img: &RgbImage, mask: &SalientMask) -> RgbImage {
    let mut out = img.clone();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.mask.get((y as usize, x as usize)).copied().unwrap_or(false) {
            let Rgb([r, g, b]) = *px;
            *px = Rgb([
                ((r as u16 + 255) / 2) as u8,
                (g as u16 / 2) as u8,
                (b as u16 / 2) as u8,
            ]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn tv_of_constant_and_step() {
        assert_eq!(tv_norm(&Array3::from_elem((2, 5, 5), 3.0)), 0.0);
        let h = 2.5;
        let step = Array3::from_shape_fn((1, 4, 4), |(_, _, x)| if x >= 2 { h } else { 0.0 });
        assert!((tv_norm(&step) - h * 4.0 / 16.0).abs() < 1e-12);
        assert!((tv_norm(&(&step * 2.0)) - 2.0 * tv_norm(&step)).abs() < 1e-12);
    }

    #[test]
    fn tv_gradient_matches_differences() {
        let z = Array3::from_shape_fn((2, 4, 5), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 11) as f64 * 0.1 + 0.01 * x as f64);
        let g = tv_grad(&z);
        let eps = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 3, 4), (1, 1, 1)] {
            let mut p = z.clone();
            p[idx] += eps;
            let mut m = z.clone();
            m[idx] -= eps;
            let fd = (tv_norm(&p) - tv_norm(&m)) / (2.0 * eps);
            assert!((fd - g[idx]).abs() < 1e-6, "{idx:?}: {fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn zero_target_stays_at_zero() {
        let layer = Identity { shape: (1, 3, 3) };
        let cfg = InversionConfig {
            iterations: 50,
            lambda_tv: 0.3,
            ..Default::default()
        };
        let inv = invert_features(&Array3::zeros((1, 3, 3)), &layer, &cfg).unwrap();
        assert_eq!(inv.log[0].objective, 0.0);
        assert!(inv.image.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_extremes() {
        let mut m = Array2::zeros((7, 7));
        m[[3, 3]] = 1.0;
        let full = salient_region_mask(m.view(), 0.0).unwrap();
        assert_eq!(full.area(), 224 * 224);
        let hot = salient_region_mask(m.view(), 95.0).unwrap();
        assert!(hot.mask[[112, 112]]);
        assert!(!hot.mask[[0, 0]]);
        let flat = salient_region_mask(Array2::from_elem((7, 7), 0.4).view(), 50.0).unwrap();
        assert_eq!(flat.area(), 0);
        assert!(salient_region_mask(m.view(), 100.0).is_err());
    }
}
