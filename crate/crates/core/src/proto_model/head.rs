use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub const HEAD_MIN: f64 = -0.5;
pub const HEAD_MAX: f64 = 1.0;

/// Linear map from `C*M` pooled similarities to `C` logits, weights kept in `[-0.5, 1.0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Array2<f64>,
}

impl ClassifierHead {
    /// Own-class connections start at `+1.0`, cross-class connections at `-0.5`.
    pub fn init(num_classes: usize, per_class: usize) -> Result<Self> {
        ensure(num_classes >= 2, || format!("need at least 2 classes, got {num_classes}"))?;
        ensure(per_class >= 1, || "need at least 1 basis vector per class".into())?;
        let weights = Array2::from_shape_fn((num_classes, num_classes * per_class), |(c, k)| {
            if k / per_class == c {
                HEAD_MAX
            } else {
                HEAD_MIN
            }
        });
        Ok(Self { weights })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn clamp(&mut self) {
        self.weights.mapv_inplace(clamp_weight);
    }

    pub fn within_range(&self) -> bool {
        self.weights.iter().all(|&w| (HEAD_MIN..=HEAD_MAX).contains(&w))
    }

    pub fn quantize_f32(&mut self) {
        self.weights.mapv_inplace(|v| v as f32 as f64);
        self.clamp();
    }
}

pub fn clamp_weight(w: f64) -> f64 {
    w.clamp(HEAD_MIN, HEAD_MAX)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_init() {
        let head = ClassifierHead::init(2, 1).unwrap();
        assert_eq!(head.weights, ndarray::array![[1.0, -0.5], [-0.5, 1.0]]);
    }

    #[test]
    fn init_within_clamp_range() {
        let head = ClassifierHead::init(5, 7).unwrap();
        assert!(head.within_range());
        assert_eq!(head.weights.dim(), (5, 35));
        assert_eq!(head.weights.iter().filter(|&&w| w == 1.0).count(), 35);
    }

    #[test]
    fn clamp_pulls_weights_into_range() {
        assert_eq!(clamp_weight(1.3), 1.0);
        assert_eq!(clamp_weight(-0.9), -0.5);
        assert_eq!(clamp_weight(0.2), 0.2);
    }

    #[test]
    fn rejects_single_class() {
        assert!(ClassifierHead::init(1, 3).is_err());
        assert!(ClassifierHead::init(2, 0).is_err());
    }
}
