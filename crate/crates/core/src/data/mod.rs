//! Datasets: folder-per-class ingestion, augmentation and a synthetic toy set.

mod augment;
mod ingest;
pub mod synthetic;

use image::RgbImage;
use ndarray::Array3;

pub use augment::{augment, resize_to_input, AugmentConfig};
pub use ingest::{ingest_dataset, ClassEntry, DatasetManifest, SkippedFile};

use crate::error::{Error, Result};
use crate::proto_model::INPUT_SIZE;

/// ImageNet channel statistics used to normalize `[0, 1]` RGB.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub label: usize,
    /// Relative path or generator tag.
    pub source: String,
    /// Always `224 x 224`.
    pub image: RgbImage,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Validation("dataset needs at least two classes".into()));
        }
        for s in &samples {
            if s.label >= classes.len() {
                return Err(Error::Validation(format!("sample {} has label {}", s.id, s.label)));
            }
            if s.image.dimensions() != (INPUT_SIZE as u32, INPUT_SIZE as u32) {
                return Err(Error::Dimension(format!(
                    "sample {} is {:?}, expected {INPUT_SIZE}x{INPUT_SIZE}",
                    s.id,
                    s.image.dimensions()
                )));
            }
        }
        Ok(Self { classes, samples })
    }

    /// Decodes every manifest entry, optionally adding augmented copies.
    pub fn load(manifest: &DatasetManifest, aug: &AugmentConfig, seed: u64) -> Result<Self> {
        let mut samples = Vec::new();
        for (label, class) in manifest.classes.iter().enumerate() {
            for rel in &class.images {
                let path = manifest.root.join(rel);
                let img = image::open(&path)
                    .map_err(|source| Error::Image {
                        path: path.clone(),
                        source,
                    })?
                    .to_rgb8();
                let id = samples.len();
                samples.push(Sample {
                    id,
                    label,
                    source: rel.clone(),
                    image: resize_to_input(&img),
                });
                if aug.enabled {
                    for copy in 0..aug.copies {
                        let id = samples.len();
                        let s = seed ^ ((id as u64) << 20) ^ copy as u64;
                        samples.push(Sample {
                            id,
                            label,
                            source: format!("{rel}#aug{copy}"),
                            image: augment(&img, aug, s),
                        });
                    }
                }
            }
        }
        Self::new(manifest.classes.iter().map(|c| c.name.clone()).collect(), samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn tensor(&self, index: usize) -> Array3<f64> {
        image_to_tensor(&self.samples[index].image)
    }

    /// Keeps at most `per_class` samples of each class, in id order.
    pub fn subset_per_class(&self, per_class: usize) -> Dataset {
        let mut taken = vec![0; self.classes.len()];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                taken[s.label] += 1;
                taken[s.label] <= per_class
            })
            .cloned()
            .collect();
        Dataset {
            classes: self.classes.clone(),
            samples,
        }
    }
}

/// `[3, H, W]` normalized tensor.
pub fn image_to_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        let v = img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0;
        (v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]
    })
}

/// Inverse of [`image_to_tensor`], clamping to the displayable range.
pub fn tensor_to_image(t: &Array3<f64>) -> RgbImage {
    let (_, h, w) = t.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let mut px = [0u8; 3];
        for (c, p) in px.iter_mut().enumerate() {
            let v = t[[c, y as usize, x as usize]] * CHANNEL_STD[c] + CHANNEL_MEAN[c];
            *p = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        image::Rgb(px)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip() {
        let img = RgbImage::from_fn(5, 4, |x, y| image::Rgb([(x * 40) as u8, (y * 60) as u8, 7]));
        assert_eq!(tensor_to_image(&image_to_tensor(&img)), img);
    }
}
