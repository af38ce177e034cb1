use ndarray::{Array1, Array2, Array4, ArrayView1, Axis};

use super::{BasisBank, ClassifierHead, FeatureMap};
use crate::error::{Error, Result};

/// Cosine of the angle between two vectors; `0` when either is the zero vector.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Partial derivatives of `cos(a, b)` with respect to `a` and `b`.
pub fn cosine_grad(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array1<f64>, Array1<f64>) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return (Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let cos = a.dot(&b) / (na * nb);
    let da = &b / (na * nb) - &a * (cos / (na * na));
    let db = &a / (na * nb) - &b * (cos / (nb * nb));
    (da, db)
}

/// Cosine matrix between unit-normalized patch rows `[P, D]` and basis rows `[K, D]`.
pub(crate) fn cosine_matrix(patches: &Array2<f64>, vectors: &Array2<f64>) -> Array2<f64> {
    let pn = normalize_rows(patches);
    let vn = normalize_rows(vectors);
    let mut cos = pn.dot(&vn.t());
    cos.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    cos
}

pub(crate) fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

/// `[B, C*M, H, W]` cosine similarity between every patch and every basis vector.
pub fn cosine_similarity_maps(fmap: &FeatureMap, bank: &BasisBank) -> Result<Array4<f64>> {
    if fmap.channels() != bank.dim() {
        return Err(Error::Dimension(format!(
            "feature channels {} != basis dim {}",
            fmap.channels(),
            bank.dim()
        )));
    }
    let (b, _, h, w) = fmap.values().dim();
    let k = bank.total();
    let vectors = bank.flat_matrix();
    let mut out = Array4::zeros((b, k, h, w));
    for i in 0..b {
        let cos = cosine_matrix(&fmap.patch_matrix(i), &vectors);
        for (pos, row) in cos.rows().into_iter().enumerate() {
            let (y, x) = (pos / w, pos % w);
            for (j, &v) in row.iter().enumerate() {
                out[[i, j, y, x]] = v;
            }
        }
    }
    Ok(out)
}

/// Max over each `H x W` map. Returns pooled values and the flat argmax position
/// (first maximum in row-major order).
pub fn global_max_pool_with_argmax(simmaps: &Array4<f64>) -> Result<(Array2<f64>, Array2<usize>)> {
    let (b, k, h, w) = simmaps.dim();
    if h == 0 || w == 0 {
        return Err(Error::Dimension("empty spatial dims".into()));
    }
    let mut pooled = Array2::zeros((b, k));
    let mut arg = Array2::zeros((b, k));
    for i in 0..b {
        for j in 0..k {
            let map = simmaps.index_axis(Axis(0), i);
            let map = map.index_axis(Axis(0), j);
            let mut best = f64::NEG_INFINITY;
            let mut best_pos = 0;
            for (pos, &v) in map.iter().enumerate() {
                if v > best {
                    best = v;
                    best_pos = pos;
                }
            }
            pooled[[i, j]] = best;
            arg[[i, j]] = best_pos;
        }
    }
    Ok((pooled, arg))
}

pub fn global_max_pool(simmaps: &Array4<f64>) -> Result<Array2<f64>> {
    global_max_pool_with_argmax(simmaps).map(|(p, _)| p)
}

/// Head logits `[B, C]`: each class sums the pooled similarities times its weights.
pub fn logits(scores: &Array2<f64>, head: &ClassifierHead) -> Result<Array2<f64>> {
    if scores.ncols() != head.weights.ncols() {
        return Err(Error::Dimension(format!(
            "scores have {} columns, head expects {}",
            scores.ncols(),
            head.weights.ncols()
        )));
    }
    Ok(scores.dot(&head.weights.t()))
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Softmax class probabilities `[B, C]`.
pub fn classify(scores: &Array2<f64>, head: &ClassifierHead) -> Result<Array2<f64>> {
    Ok(softmax_rows(&logits(scores, head)?))
}
