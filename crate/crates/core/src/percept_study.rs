//! Sensitivity of concept masks to perceptual-domain perturbations.
//!
//! Masks are basis vectors re-extracted (argmax-projected) from a sample of
//! images. Perturbed masks come from the same images after one perturbation;
//! the per-image difference of aggregation terms measures sensitivity.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{image_to_tensor, Dataset};
use crate::error::{ensure, Error, Result};
use crate::proto_model::{cosine, BasisBank, ProtoModel};
use crate::rank_sensitivity::ConceptAssignment;
use crate::trainer::project_onto_patches;
use crate::util::{quantile_sorted, stream_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbSpec {
    pub contrast: f64,
    pub brightness: f64,
    pub saturation: f64,
    /// Maximum hue shift as a fraction of the hue circle.
    pub hue: f64,
    /// Denoising filter strength in 8-bit intensity units.
    pub texture_denoise_strength: f64,
    /// Maximum cyclic displacement as a fraction of the image side.
    pub shape_roll_fraction: f64,
}

impl Default for PerturbSpec {
    fn default() -> Self {
        Self {
            contrast: 0.45,
            brightness: 0.8,
            saturation: 0.7,
            hue: 0.1,
            texture_denoise_strength: 4.0,
            shape_roll_fraction: 0.1,
        }
    }
}

impl PerturbSpec {
    /// Every perturbation disabled.
    pub fn identity() -> Self {
        Self {
            contrast: 0.0,
            brightness: 0.0,
            saturation: 0.0,
            hue: 0.0,
            texture_denoise_strength: 0.0,
            shape_roll_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("contrast", self.contrast),
            ("brightness", self.brightness),
            ("saturation", self.saturation),
            ("texture_denoise_strength", self.texture_denoise_strength),
        ] {
            ensure(v >= 0.0 && v.is_finite(), || format!("{name} must be finite and >= 0, got {v}"))?;
        }
        ensure((0.0..=0.5).contains(&self.hue), || format!("hue must be in [0, 0.5], got {}", self.hue))?;
        ensure((0.0..=1.0).contains(&self.shape_roll_fraction), || {
            format!("shape_roll_fraction must be in [0, 1], got {}", self.shape_roll_fraction)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Hue,
    Brightness,
    Contrast,
    Saturation,
    Texture,
    Shape,
}

impl Domain {
    pub const ALL: [Domain; 6] = [
        Domain::Hue,
        Domain::Brightness,
        Domain::Contrast,
        Domain::Saturation,
        Domain::Texture,
        Domain::Shape,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Hue => "hue",
            Domain::Brightness => "brightness",
            Domain::Contrast => "contrast",
            Domain::Saturation => "saturation",
            Domain::Texture => "texture",
            Domain::Shape => "shape",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown perceptual domain '{s}', expected one of hue, brightness, contrast, saturation, texture, shape"
                ))
            })
    }
}

fn jitter_factor(rng: &mut ChaCha8Rng, amount: f64) -> f64 {
    if amount == 0.0 {
        return 1.0;
    }
    rng.random_range((1.0 - amount).max(0.0)..=1.0 + amount)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn gray(p: &Rgb<u8>) -> f64 {
    0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
}

fn blend(img: &RgbImage, factor: f64, toward: impl Fn(u32, u32) -> f64) -> RgbImage {
    if factor == 1.0 {
        return img.clone();
    }
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y);
        let t = toward(x, y);
        Rgb([0, 1, 2].map(|c| to_u8(factor * p[c] as f64 + (1.0 - factor) * t)))
    })
}

pub(crate) fn rgb_to_hsv(p: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = p;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    [h, if max == 0.0 { 0.0 } else { d / max }, max]
}

pub(crate) fn hsv_to_rgb(hsv: [f64; 3]) -> [f64; 3] {
    let [h, s, v] = hsv;
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn shift_hue(img: &RgbImage, shift: f64) -> RgbImage {
    if shift == 0.0 {
        return img.clone();
    }
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let p = img.get_pixel(x, y).0.map(|v| v as f64 / 255.0);
        let [h, s, v] = rgb_to_hsv(p);
        Rgb(hsv_to_rgb([h + shift, s, v]).map(|c| to_u8(c * 255.0)))
    })
}

/// Non-local-means denoising: 3x3 patches compared within a 7x7 search window,
/// weights `exp(-d2 / h^2)` with `d2` the mean squared patch difference.
pub fn nl_means_denoise(img: &RgbImage, h: f64) -> RgbImage {
    if h == 0.0 {
        return img.clone();
    }
    const PATCH: i64 = 1;
    const SEARCH: i64 = 3;
    let (w, hgt) = (img.width() as i64, img.height() as i64);
    let px = |x: i64, y: i64| img.get_pixel(x.clamp(0, w - 1) as u32, y.clamp(0, hgt - 1) as u32);
    let h2 = h * h;
    let norm = ((2 * PATCH + 1) * (2 * PATCH + 1) * 3) as f64;
    RgbImage::from_fn(w as u32, hgt as u32, |x, y| {
        let (x, y) = (x as i64, y as i64);
        let mut acc = [0.0; 3];
        let mut wsum = 0.0;
        for sy in -SEARCH..=SEARCH {
            for sx in -SEARCH..=SEARCH {
                let (qx, qy) = (x + sx, y + sy);
                let mut d2 = 0.0;
                for py in -PATCH..=PATCH {
                    for pxo in -PATCH..=PATCH {
                        let a = px(x + pxo, y + py);
                        let b = px(qx + pxo, qy + py);
                        for c in 0..3 {
                            let d = a[c] as f64 - b[c] as f64;
                            d2 += d * d;
                        }
                    }
                }
                let weight = (-(d2 / norm) / h2).exp();
                let q = px(qx, qy);
                for c in 0..3 {
                    acc[c] += weight * q[c] as f64;
                }
                wsum += weight;
            }
        }
        Rgb(acc.map(|v| to_u8(v / wsum)))
    })
}

/// Cyclic sinusoidal displacement: row `y` rolls horizontally by
/// `round(a * W * sin(2 pi y / H + phi))`, then columns roll vertically likewise.
pub fn sinusoidal_roll(img: &RgbImage, fraction: f64, phases: (f64, f64)) -> RgbImage {
    if fraction == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let tau = std::f64::consts::TAU;
    let rows = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let s = (fraction * w as f64 * (tau * y as f64 / h as f64 + phases.0).sin()).round() as i64;
        *img.get_pixel((x as i64 - s).rem_euclid(w) as u32, y)
    });
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let s = (fraction * h as f64 * (tau * x as f64 / w as f64 + phases.1).sin()).round() as i64;
        *rows.get_pixel(x, (y as i64 - s).rem_euclid(h) as u32)
    })
}

/// Perturbs one visual attribute. Random factors are drawn from `seed`; a zero
/// amount in `spec` leaves the image untouched.
pub fn apply_perturbation(img: &RgbImage, domain: Domain, spec: &PerturbSpec, seed: u64) -> Result<RgbImage> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match domain {
        Domain::Brightness => {
            let f = jitter_factor(&mut rng, spec.brightness);
            blend(img, f, |_, _| 0.0)
        }
        Domain::Contrast => {
            let f = jitter_factor(&mut rng, spec.contrast);
            let mean = img.pixels().map(gray).sum::<f64>() / (img.width() * img.height()).max(1) as f64;
            blend(img, f, |_, _| mean)
        }
        Domain::Saturation => {
            let f = jitter_factor(&mut rng, spec.saturation);
            blend(img, f, |x, y| gray(img.get_pixel(x, y)))
        }
        Domain::Hue => {
            let shift = if spec.hue == 0.0 { 0.0 } else { rng.random_range(-spec.hue..=spec.hue) };
            shift_hue(img, shift)
        }
        Domain::Texture => nl_means_denoise(img, spec.texture_denoise_strength),
        Domain::Shape => {
            let phases = (rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.0..std::f64::consts::TAU));
            sinusoidal_roll(img, spec.shape_roll_fraction, phases)
        }
    })
}

/// Add-on patch matrices `[49, D]` of each image.
fn image_patches(model: &ProtoModel, images: &[RgbImage]) -> Vec<Array2<f64>> {
    images
        .iter()
        .map(|img| model.addon_patches(&model.backbone_features(&image_to_tensor(img))))
        .collect()
}

/// Masks projected from the given images: a copy of the bank with each basis
/// vector replaced by its most similar same-class patch.
pub fn extract_masks(model: &ProtoModel, sample: &Dataset) -> Result<BasisBank> {
    let images: Vec<RgbImage> = sample.samples.iter().map(|s| s.image.clone()).collect();
    let patches = image_patches(model, &images);
    let mut copy = model.clone();
    project_onto_patches(&mut copy, sample, &patches)?;
    Ok(copy.bank)
}

fn aggregation_term(bank: &BasisBank, filters: &[usize], patches: &Array2<f64>) -> f64 {
    let mut best = f64::INFINITY;
    for &f in filters {
        let a = bank.flat(f);
        for p in patches.outer_iter() {
            best = best.min(-cosine(a, p));
        }
    }
    best
}

/// Per-image `delta = agg(original) - agg(perturbed)` for each concept, over the
/// concept's filters belonging to the image's class. Images whose class owns no
/// filter of a concept are skipped for that concept.
pub fn sensitivity_delta(
    original: &BasisBank,
    perturbed: &BasisBank,
    patches: &[Array2<f64>],
    labels: &[usize],
    assignment: &ConceptAssignment,
) -> Result<BTreeMap<String, Vec<f64>>> {
    if original.vectors.dim() != perturbed.vectors.dim() {
        return Err(Error::Validation(format!(
            "mask counts differ: {:?} vs {:?}",
            original.vectors.dim(),
            perturbed.vectors.dim()
        )));
    }
    ensure(patches.len() == labels.len(), || "one label per image".into())?;
    let m = original.per_class();
    let mut out = BTreeMap::new();
    for concept in &assignment.concepts {
        let filters = assignment.filters_of(concept);
        let mut deltas = Vec::new();
        for (p, &label) in patches.iter().zip(labels) {
            let own: Vec<usize> = filters.iter().copied().filter(|f| f / m == label).collect();
            if own.is_empty() {
                continue;
            }
            deltas.push(aggregation_term(original, &own, p) - aggregation_term(perturbed, &own, p));
        }
        out.insert(concept.clone(), deltas);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Most extreme values within 1.5 IQR of the box.
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub mean: f64,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    ensure(values.len() >= 2, || format!("box plot needs at least 2 values, got {}", values.len()))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box-plot values".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&s, 0.25);
    let q3 = quantile_sorted(&s, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    Ok(BoxStats {
        n: s.len(),
        min: s[0],
        q1,
        median: quantile_sorted(&s, 0.5),
        q3,
        max: s[s.len() - 1],
        whisker_low: s.iter().copied().find(|&v| v >= lo_fence).unwrap_or(s[0]),
        whisker_high: s.iter().rev().copied().find(|&v| v <= hi_fence).unwrap_or(s[s.len() - 1]),
        mean: s.iter().sum::<f64>() / s.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub concept: String,
    pub domain: Domain,
    pub stats: BoxStats,
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub samples_per_category: usize,
    pub seed: u64,
    pub spec: PerturbSpec,
    pub cells: Vec<ReportCell>,
}

impl SensitivityReport {
    pub fn cell(&self, concept: &str, domain: Domain) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.concept == concept && c.domain == domain)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Box-plot statistics for every (concept, domain) cell.
pub fn sensitivity_report(
    deltas: &BTreeMap<(String, Domain), Vec<f64>>,
    samples_per_category: usize,
    seed: u64,
    spec: &PerturbSpec,
) -> Result<SensitivityReport> {
    let cells = deltas
        .iter()
        .map(|((concept, domain), d)| {
            Ok(ReportCell {
                concept: concept.clone(),
                domain: *domain,
                stats: box_stats(d).map_err(|e| Error::Validation(format!("{concept}/{domain}: {e}")))?,
                deltas: d.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport {
        samples_per_category,
        seed,
        spec: spec.clone(),
        cells,
    })
}

/// Seeded sample of up to `per_class` images of each class.
pub fn sample_per_class(data: &Dataset, per_class: usize, seed: u64) -> Dataset {
    let mut chosen = Vec::new();
    for c in 0..data.num_classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].label == c).collect();
        idx.shuffle(&mut stream_rng(seed, &format!("percept-sample-{c}")));
        idx.truncate(per_class);
        chosen.extend(idx);
    }
    chosen.sort_unstable();
    Dataset {
        classes: data.classes.clone(),
        samples: chosen.into_iter().map(|i| data.samples[i].clone()).collect(),
    }
}

/// Runs every requested domain and assembles the report.
pub fn run_percept_study(
    model: &ProtoModel,
    data: &Dataset,
    assignment: &ConceptAssignment,
    domains: &[Domain],
    spec: &PerturbSpec,
    samples_per_category: usize,
    seed: u64,
) -> Result<SensitivityReport> {
    spec.validate()?;
    ensure(!domains.is_empty(), || "no perceptual domains selected".into())?;
    let sample = sample_per_class(data, samples_per_category, seed);
    let labels: Vec<usize> = sample.samples.iter().map(|s| s.label).collect();
    let originals: Vec<RgbImage> = sample.samples.iter().map(|s| s.image.clone()).collect();
    let patches = image_patches(model, &originals);
    let original_masks = extract_masks(model, &sample)?;
    let mut all = BTreeMap::new();
    for &domain in domains {
        let mut perturbed = sample.clone();
        for s in perturbed.samples.iter_mut() {
            let img_seed = stream_rng(seed, &format!("perturb-{domain}-{}", s.id)).random::<u64>();
            s.image = apply_perturbation(&s.image, domain, spec, img_seed)?;
        }
        let masks = extract_masks(model, &perturbed)?;
        for (concept, d) in sensitivity_delta(&original_masks, &masks, &patches, &labels, assignment)? {
            all.insert((concept, domain), d);
        }
        log::info!("percept study: {domain} done");
    }
    sensitivity_report(&all, samples_per_category, seed, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> RgbImage {
        RgbImage::from_fn(16, 12, |x, y| Rgb([(x * 15) as u8, (y * 20) as u8, ((x + y) * 7) as u8]))
    }

    #[test]
    fn zero_amounts_are_identity() {
        let img = sample_image();
        for d in Domain::ALL {
            assert_eq!(apply_perturbation(&img, d, &PerturbSpec::identity(), 3).unwrap(), img, "{d}");
        }
    }

    #[test]
    fn unknown_domain_is_rejected() {
        assert!("blur".parse::<Domain>().is_err());
        assert_eq!("Shape".parse::<Domain>().unwrap(), Domain::Shape);
    }

    #[test]
    fn seeded_perturbations_repeat() {
        let img = sample_image();
        let spec = PerturbSpec::default();
        for d in Domain::ALL {
            assert_eq!(
                apply_perturbation(&img, d, &spec, 9).unwrap(),
                apply_perturbation(&img, d, &spec, 9).unwrap()
            );
        }
    }

    #[test]
    fn constant_box_has_zero_width() {
        let b = box_stats(&[0.3; 5]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (0.3, 0.3, 0.3));
        assert!(box_stats(&[1.0]).is_err());
    }
}
