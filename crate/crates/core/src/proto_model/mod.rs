//! Proto-CNN: a convolutional backbone, a two-layer 1x1 add-on ending in a
//! sigmoid, a per-class bank of concept basis vectors, cosine similarity maps,
//! global max pooling and a clamped linear head.
//!
//! Tensors are `f64` `ndarray`s. Images are `[3, 224, 224]`, feature maps are
//! `[batch, D, 7, 7]`. Inside the add-on each image is handled as a patch
//! matrix `[H*W, channels]` so the 1x1 convolutions become plain matmuls.

mod bank;
pub mod conv;
mod head;
pub mod similarity;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use bank::BasisBank;
pub use conv::Conv2d;
pub use head::{clamp_weight, ClassifierHead, HEAD_MAX, HEAD_MIN};
pub use similarity::{
    classify, cosine, cosine_grad, cosine_similarity_maps, global_max_pool,
    global_max_pool_with_argmax, logits, softmax_rows,
};

use crate::error::{ensure, Error, Result};

pub const INPUT_SIZE: usize = 224;
pub const FEATURE_SIZE: usize = 7;

/// Activations of the add-on output, `[batch, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array4<f64>,
}

impl FeatureMap {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        let (_, d, h, w) = values.dim();
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Dimension(format!("feature map with shape {:?}", values.dim())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { values })
    }

    /// Builds a batch from per-image patch matrices `[H*W, D]`.
    pub fn from_patches(patches: &[Array2<f64>], h: usize, w: usize) -> Result<Self> {
        let d = patches.first().map(|p| p.ncols()).unwrap_or(0);
        let mut values = Array4::zeros((patches.len(), d, h, w));
        for (b, p) in patches.iter().enumerate() {
            if p.dim() != (h * w, d) {
                return Err(Error::Dimension(format!("patch matrix {:?} vs {h}x{w}x{d}", p.dim())));
            }
            values
                .index_axis_mut(Axis(0), b)
                .assign(&patches_to_chw(p, h, w));
        }
        Self::new(values)
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array4<f64> {
        self.values
    }

    pub fn batch(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn height(&self) -> usize {
        self.values.dim().2
    }

    pub fn width(&self) -> usize {
        self.values.dim().3
    }

    /// Patch vectors of one image as rows, position index `h * W + w`.
    pub fn patch_matrix(&self, b: usize) -> Array2<f64> {
        chw_to_patches(&self.values.index_axis(Axis(0), b).to_owned())
    }

    pub fn image(&self, b: usize) -> Array3<f64> {
        self.values.index_axis(Axis(0), b).to_owned()
    }

    pub fn select(&self, indices: &[usize]) -> FeatureMap {
        FeatureMap {
            values: self.values.select(Axis(0), indices),
        }
    }
}

pub fn chw_to_patches(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut out = Array2::zeros((h * w, c));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[y * w + xx, ch]] = x[[ch, y, xx]];
            }
        }
    }
    out
}

pub fn patches_to_chw(p: &Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = p.ncols();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| p[[y * w + x, ch]])
}

/// Shape of the network; everything else is learned or seeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of each stride-2 3x3 backbone layer.
    pub backbone_channels: Vec<usize>,
    /// Add-on output width `D`.
    pub addon_channels: usize,
    /// Basis vectors per class `M`.
    pub per_class: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![8, 16, 32, 32, 64],
            addon_channels: 128,
            per_class: 100,
        }
    }
}

/// Stack of 3x3 stride-2 convolutions, each followed by ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub layers: Vec<Conv2d>,
}

/// Per-layer inputs kept for the backward pass; the last entry is the backbone output.
pub struct BackboneTrace {
    pub activations: Vec<Array3<f64>>,
}

pub struct BackboneGrads {
    pub input: Array3<f64>,
    pub layers: Vec<conv::ConvGrads>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], rng: &mut R) -> Self {
        let mut in_ch = 3;
        let layers = channels
            .iter()
            .map(|&out| {
                let layer = Conv2d::he_init(in_ch, out, 3, 2, 1, rng);
                in_ch = out;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels()).unwrap_or(3)
    }

    pub fn output_size(&self, size: usize) -> usize {
        self.layers.iter().fold(size, |s, l| l.output_size(s, s).0)
    }

    pub fn forward(&self, image: &Array3<f64>) -> Array3<f64> {
        let mut x = image.clone();
        for layer in &self.layers {
            x = layer.forward(&x);
            x.mapv_inplace(|v| v.max(0.0));
        }
        x
    }

    pub fn forward_trace(&self, image: &Array3<f64>) -> BackboneTrace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(image.clone());
        for layer in &self.layers {
            let mut x = layer.forward(activations.last().expect("non-empty"));
            x.mapv_inplace(|v| v.max(0.0));
            activations.push(x);
        }
        BackboneTrace { activations }
    }

    pub fn backward(&self, trace: &BackboneTrace, grad_out: &Array3<f64>) -> BackboneGrads {
        let mut grad = grad_out.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &trace.activations[i + 1];
            ndarray::Zip::from(&mut grad)
                .and(out)
                .for_each(|g, &o| if o <= 0.0 { *g = 0.0 });
            let g = layer.backward(&trace.activations[i], &grad);
            grad = g.input.clone();
            layer_grads.push(g);
        }
        layer_grads.reverse();
        BackboneGrads {
            input: grad,
            layers: layer_grads,
        }
    }

    /// Order-independent digest of all weights, used to assert freezing.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::util::Fnv::default();
        for l in &self.layers {
            h.write_f64s(l.weight.iter());
            h.write_f64s(l.bias.iter());
        }
        h.finish()
    }
}

/// Two 1x1 convolutions: ReLU then sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddOn {
    /// `[mid, in]`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `[out, mid]`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub struct AddOnCache {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct AddOnGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl AddOnGrads {
    pub fn zeros_like(a: &AddOn) -> Self {
        Self {
            w1: Array2::zeros(a.w1.raw_dim()),
            b1: Array1::zeros(a.b1.raw_dim()),
            w2: Array2::zeros(a.w2.raw_dim()),
            b2: Array1::zeros(a.b2.raw_dim()),
        }
    }

    pub fn accumulate(&mut self, other: &AddOnGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl AddOn {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let mid = out_ch;
        let he = Normal::new(0.0, (2.0 / in_ch as f64).sqrt()).expect("std");
        let xavier = Normal::new(0.0, (1.0 / mid as f64).sqrt()).expect("std");
        Self {
            w1: Array2::from_shape_fn((mid, in_ch), |_| he.sample(rng)),
            b1: Array1::zeros(mid),
            w2: Array2::from_shape_fn((out_ch, mid), |_| xavier.sample(rng)),
            b2: Array1::zeros(out_ch),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, input: &Array2<f64>) -> AddOnCache {
        let mut hidden = input.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let mut output = hidden.dot(&self.w2.t()) + &self.b2;
        output.mapv_inplace(sigmoid);
        AddOnCache {
            input: input.clone(),
            hidden,
            output,
        }
    }

    /// Returns parameter gradients and the gradient with respect to the add-on input.
    pub fn backward(&self, cache: &AddOnCache, grad_out: &Array2<f64>) -> (AddOnGrads, Array2<f64>) {
        let mut dpre2 = grad_out.clone();
        ndarray::Zip::from(&mut dpre2)
            .and(&cache.output)
            .for_each(|g, &z| *g *= z * (1.0 - z));
        let w2 = dpre2.t().dot(&cache.hidden);
        let b2 = dpre2.sum_axis(Axis(0));
        let mut dh = dpre2.dot(&self.w2);
        ndarray::Zip::from(&mut dh)
            .and(&cache.hidden)
            .for_each(|g, &h| if h <= 0.0 { *g = 0.0 });
        let w1 = dh.t().dot(&cache.input);
        let b1 = dh.sum_axis(Axis(0));
        let dx = dh.dot(&self.w1);
        (AddOnGrads { w1, b1, w2, b2 }, dx)
    }

    pub fn checksum(&self) -> u64 {
        let mut h = crate::util::Fnv::default();
        h.write_f64s(self.w1.iter());
        h.write_f64s(self.b1.iter());
        h.write_f64s(self.w2.iter());
        h.write_f64s(self.b2.iter());
        h.finish()
    }
}

/// Everything needed to go from a normalized image to class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoModel {
    pub backbone: Backbone,
    pub addon: AddOn,
    pub bank: BasisBank,
    pub head: ClassifierHead,
}

/// Full forward pass of one batch.
pub struct Forward {
    pub features: FeatureMap,
    pub similarities: Array4<f64>,
    pub pooled: Array2<f64>,
    pub probabilities: Array2<f64>,
}

impl ProtoModel {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        class_labels: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        ensure(class_labels.len() >= 2, || "need at least two classes".into())?;
        ensure(cfg.per_class >= 1, || "per_class must be >= 1".into())?;
        ensure(cfg.addon_channels >= 1, || "addon_channels must be >= 1".into())?;
        let backbone = Backbone::new(&cfg.backbone_channels, rng);
        if backbone.output_size(INPUT_SIZE) != FEATURE_SIZE {
            return Err(Error::Config(format!(
                "backbone maps {INPUT_SIZE}px input to {}px, expected {FEATURE_SIZE}",
                backbone.output_size(INPUT_SIZE)
            )));
        }
        let addon = AddOn::new(backbone.out_channels(), cfg.addon_channels, rng);
        let c = class_labels.len();
        let bank = BasisBank::init_uniform(class_labels, cfg.per_class, cfg.addon_channels, rng);
        let head = ClassifierHead::init(c, cfg.per_class)?;
        Ok(Self {
            backbone,
            addon,
            bank,
            head,
        })
    }

    pub fn class_labels(&self) -> &[String] {
        &self.bank.class_labels
    }

    pub fn check_images(images: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if c != 3 || h != INPUT_SIZE || w != INPUT_SIZE {
            return Err(Error::Dimension(format!(
                "expected [batch, 3, {INPUT_SIZE}, {INPUT_SIZE}] images, got {:?}",
                images.dim()
            )));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input images".into()));
        }
        Ok(())
    }

    /// Backbone output of one `[3, 224, 224]` image.
    pub fn backbone_features(&self, image: &Array3<f64>) -> Array3<f64> {
        self.backbone.forward(image)
    }

    /// Add-on patch matrix `[H*W, D]` from backbone features.
    pub fn addon_patches(&self, backbone_out: &Array3<f64>) -> Array2<f64> {
        self.addon.forward(&chw_to_patches(backbone_out)).output
    }

    /// `[batch, D, 7, 7]` sigmoid-activated features.
    pub fn extract_features(&self, images: &Array4<f64>) -> Result<FeatureMap> {
        Self::check_images(images)?;
        let patches: Vec<Array2<f64>> = images
            .outer_iter()
            .map(|img| self.addon_patches(&self.backbone_features(&img.to_owned())))
            .collect();
        FeatureMap::from_patches(&patches, FEATURE_SIZE, FEATURE_SIZE)
    }

    pub fn forward_features(&self, features: FeatureMap) -> Result<Forward> {
        let similarities = cosine_similarity_maps(&features, &self.bank)?;
        let pooled = global_max_pool(&similarities)?;
        let probabilities = classify(&pooled, &self.head)?;
        Ok(Forward {
            features,
            similarities,
            pooled,
            probabilities,
        })
    }

    pub fn forward(&self, images: &Array4<f64>) -> Result<Forward> {
        let features = self.extract_features(images)?;
        self.forward_features(features)
    }

    pub fn bank_checksum(&self) -> u64 {
        let mut h = crate::util::Fnv::default();
        h.write_f64s(self.bank.vectors.iter());
        h.finish()
    }

    pub fn head_checksum(&self) -> u64 {
        let mut h = crate::util::Fnv::default();
        h.write_f64s(self.head.weights.iter());
        h.finish()
    }
}

/// Stacks `[3, H, W]` images into a batch.
pub fn stack_images(images: &[Array3<f64>]) -> Result<Array4<f64>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Validation("empty image batch".into()))?;
    let (c, h, w) = first.dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Dimension("images of different sizes in one batch".into()));
        }
        out.slice_mut(s![i, .., .., ..]).assign(img);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> ProtoModel {
        let cfg = ModelConfig {
            backbone_channels: vec![4, 4, 8, 8, 8],
            addon_channels: 16,
            per_class: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ProtoModel::new(&cfg, vec!["a".into(), "b".into()], &mut rng).unwrap()
    }

    #[test]
    fn zero_image_gives_bounded_features() {
        let model = small_model();
        let fmap = model
            .extract_features(&Array4::zeros((1, 3, 224, 224)))
            .unwrap();
        assert_eq!(fmap.values().dim(), (1, 16, 7, 7));
        assert!(fmap.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn duplicate_images_give_identical_rows() {
        let model = small_model();
        let img = Array3::from_shape_fn((3, 224, 224), |(c, y, x)| ((c + y * 3 + x) % 17) as f64 / 17.0);
        let batch = stack_images(&[img.clone(), img]).unwrap();
        let fmap = model.extract_features(&batch).unwrap();
        assert_eq!(fmap.image(0), fmap.image(1));
    }

    #[test]
    fn rejects_wrong_size_and_nan() {
        let model = small_model();
        assert!(matches!(
            model.extract_features(&Array4::zeros((1, 3, 112, 112))),
            Err(Error::Dimension(_))
        ));
        let mut img = Array4::zeros((1, 3, 224, 224));
        img[[0, 1, 5, 5]] = f64::NAN;
        assert!(matches!(model.extract_features(&img), Err(Error::NonFinite(_))));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = small_model();
        let img = Array4::from_shape_fn((2, 3, 224, 224), |(b, c, y, x)| ((b + c + y + x) % 5) as f64 - 2.0);
        let fwd = model.forward(&img).unwrap();
        for row in fwd.probabilities.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
        assert!(fwd.similarities.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn addon_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let addon = AddOn::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 4 + j) as f64 * 0.7).sin());
        let coeff = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let loss = |a: &AddOn| (a.forward(&x).output * &coeff).sum();
        let cache = addon.forward(&x);
        let (g, dx) = addon.backward(&cache, &coeff);
        let eps = 1e-6;
        let mut a = addon.clone();
        a.w1[[1, 2]] += eps;
        let mut b = addon.clone();
        b.w1[[1, 2]] -= eps;
        assert!(((loss(&a) - loss(&b)) / (2.0 * eps) - g.w1[[1, 2]]).abs() < 1e-7);
        let mut a = addon.clone();
        a.w2[[2, 0]] += eps;
        let mut b = addon.clone();
        b.w2[[2, 0]] -= eps;
        assert!(((loss(&a) - loss(&b)) / (2.0 * eps) - g.w2[[2, 0]]).abs() < 1e-7);
        let mut a = addon.clone();
        a.b2[1] += eps;
        let mut b = addon.clone();
        b.b2[1] -= eps;
        assert!(((loss(&a) - loss(&b)) / (2.0 * eps) - g.b2[1]).abs() < 1e-7);
        let mut xp = x.clone();
        xp[[2, 3]] += eps;
        let mut xm = x.clone();
        xm[[2, 3]] -= eps;
        let fd = ((addon.forward(&xp).output - addon.forward(&xm).output) * &coeff).sum() / (2.0 * eps);
        assert!((fd - dx[[2, 3]]).abs() < 1e-7);
    }
}
