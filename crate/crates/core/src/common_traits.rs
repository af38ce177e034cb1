//! Row-centered PCA over per-concept feature collections.
//!
//! Rows are samples and columns are features. The sample covariance
//! `P = W^ W^T / (dim - 1)` is `N_s x N_s`; its eigenvectors `U_k` combine
//! samples into feature-space components `W^T U_k`, the common traits.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::binfmt;
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::proto_model::{stack_images, ProtoModel};
use crate::rank_sensitivity::ConceptAssignment;
use crate::util::stream_rng;

/// Eigenvalues at or below this fraction of the largest are treated as zero.
pub const EIGEN_RANK_TOLERANCE: f64 = 1e-10;
pub const MAX_DEFAULT_K: usize = 16;

/// Subtracts each row's mean.
pub fn row_center(w: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let (n, d) = w.dim();
    ensure(n >= 2, || format!("need at least 2 samples, got {n}"))?;
    ensure(d >= 1, || "samples have no features".into())?;
    let means = w.mean_axis(Axis(1)).expect("non-empty");
    let mut centered = w.clone();
    for (mut row, m) in centered.outer_iter_mut().zip(means.iter()) {
        row -= *m;
    }
    Ok((centered, means))
}

/// `W^ W^T / (dim - 1)`, exactly symmetric.
pub fn sample_covariance(centered: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = centered.dim();
    ensure(d >= 2, || format!("need at least 2 features, got {d}"))?;
    let scale = 1.0 / (d - 1) as f64;
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = centered.row(i).dot(&centered.row(j)) * scale;
            p[[i, j]] = v;
            p[[j, i]] = v;
        }
    }
    Ok(p)
}

/// Cumulative share of the trace captured by the first `k` eigenvalues of a full spectrum.
pub fn information_ratio(spectrum: &[f64], k: usize) -> f64 {
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let kept: f64 = spectrum.iter().take(k).sum();
    (kept / total).clamp(0.0, 1.0)
}

fn numeric_rank(spectrum: &[f64]) -> usize {
    let max = spectrum.first().copied().unwrap_or(0.0);
    if max <= 0.0 {
        return 0;
    }
    spectrum.iter().filter(|&&l| l > EIGEN_RANK_TOLERANCE * max).count()
}

/// Smallest `k` with information ratio at least 0.9, capped at 16 and at the rank.
pub fn default_k(spectrum: &[f64]) -> usize {
    let rank = numeric_rank(spectrum).max(1);
    let cap = rank.min(MAX_DEFAULT_K);
    (1..=cap)
        .find(|&k| information_ratio(spectrum, k) >= 0.9)
        .unwrap_or(cap)
}

/// Row-centered PCA output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSpace {
    /// `[feature_dim, k]`, columns `W^T u_i`.
    pub components: Array2<f64>,
    /// Leading `k` eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Cumulative information ratios for `1..=k`.
    pub info_ratios: Vec<f64>,
    /// All eigenvalues of `P`, descending.
    pub spectrum: Vec<f64>,
    /// `[N_s, k]` eigenvectors of `P`.
    pub sample_weights: Array2<f64>,
    pub sample_count: usize,
    pub row_means: Vec<f64>,
}

impl TraitSpace {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn rank(&self) -> usize {
        numeric_rank(&self.spectrum)
    }

    /// Component `i` scaled to unit length.
    pub fn unit_component(&self, i: usize) -> Array1<f64> {
        let c = self.components.column(i).to_owned();
        let n = c.dot(&c).sqrt();
        if n > 0.0 {
            c / n
        } else {
            c
        }
    }

    /// Projection of centered rows onto the unit components, `[N_s, k]`.
    pub fn scores(&self, centered: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((centered.nrows(), self.k()));
        for i in 0..self.k() {
            out.column_mut(i).assign(&centered.dot(&self.unit_component(i)));
        }
        out
    }
}

/// Eigendecomposition of `p` with components `w^T U_k`. `k` above the rank is
/// clamped with a warning. Each component is sign-flipped so its largest-magnitude
/// entry is positive.
pub fn principal_components(w: &Array2<f64>, p: &Array2<f64>, k: usize) -> Result<TraitSpace> {
    let (n, d) = w.dim();
    ensure(p.dim() == (n, n), || format!("covariance is {:?}, expected {n}x{n}", p.dim()))?;
    ensure(k >= 1, || "k must be >= 1".into())?;
    if w.iter().chain(p.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| p[[i, j]]));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let rank = numeric_rank(&spectrum);
    let k_used = if k > rank {
        log::warn!("requested {k} components but covariance rank is {rank}; clamping");
        rank
    } else {
        k
    };
    let mut weights = Array2::zeros((n, k_used));
    let mut components = Array2::zeros((d, k_used));
    for (col, &src) in order.iter().take(k_used).enumerate() {
        let u = Array1::from_iter((0..n).map(|r| eig.eigenvectors[(r, src)]));
        let mut c = w.t().dot(&u);
        let pivot = c.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        c *= sign;
        weights.column_mut(col).assign(&(u * sign));
        components.column_mut(col).assign(&c);
    }
    let means = w.mean_axis(Axis(1)).expect("non-empty");
    Ok(TraitSpace {
        components,
        eigenvalues: spectrum[..k_used].to_vec(),
        info_ratios: (1..=k_used).map(|i| information_ratio(&spectrum, i)).collect(),
        spectrum,
        sample_weights: weights,
        sample_count: n,
        row_means: means.to_vec(),
    })
}

/// Center, covariance and PCA in one step. `k = None` uses [`default_k`].
pub fn fit_traits(w: &Array2<f64>, k: Option<usize>) -> Result<(TraitSpace, Array2<f64>)> {
    let (centered, _) = row_center(w)?;
    let p = sample_covariance(&centered)?;
    let k = match k {
        Some(k) => k,
        None => {
            let probe = principal_components(&centered, &p, 1)?;
            default_k(&probe.spectrum)
        }
    };
    let mut space = principal_components(&centered, &p, k)?;
    space.row_means = w.mean_axis(Axis(1)).expect("non-empty").to_vec();
    Ok((space, centered))
}

/// R^2 of sorted values regressed on standard-normal quantiles at `(i - 0.5) / n`.
pub fn qq_normality_r2(values: &[f64]) -> Result<f64> {
    let n = values.len();
    ensure(n >= 20, || format!("q-q diagnostic needs at least 20 values, got {n}"))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("q-q input".into()));
    }
    let mut y = values.to_vec();
    y.sort_by(f64::total_cmp);
    if y[0] == y[n - 1] {
        return Err(Error::Validation("q-q diagnostic is undefined for constant input".into()));
    }
    let normal = Normal::standard();
    let x: Vec<f64> = (1..=n)
        .map(|i| normal.inverse_cdf((i as f64 - 0.5) / n as f64))
        .collect();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(&y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Add-on features weighted by the concept's strongest similarity at each position.
    #[default]
    MaskWeighted,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptFeatures {
    pub concept: String,
    /// `[N_s, D * H * W]`
    pub rows: Array2<f64>,
    pub sample_ids: Vec<usize>,
    /// `(D, H, W)` of one row.
    pub shape: (usize, usize, usize),
}

/// Flattened per-sample response of one concept, one row per sample.
pub fn concept_row(features: &Array3<f64>, similarities: &Array3<f64>, filters: &[usize], source: FeatureSource) -> Vec<f64> {
    match source {
        FeatureSource::Raw => features.iter().copied().collect(),
        FeatureSource::MaskWeighted => {
            let (_, h, w) = features.dim();
            let mask = Array2::from_shape_fn((h, w), |(y, x)| {
                filters
                    .iter()
                    .map(|&f| similarities[[f, y, x]])
                    .fold(0.0f64, f64::max)
            });
            let mut out = Vec::with_capacity(features.len());
            for ch in features.outer_iter() {
                for ((y, x), v) in ch.indexed_iter() {
                    out.push(v * mask[[y, x]]);
                }
            }
            out
        }
    }
}

/// Builds the sample matrix of one concept from `n_s` seeded-random images of
/// the classes owning its filters (all images when fewer are available).
pub fn collect_concept_features(
    data: &Dataset,
    model: &ProtoModel,
    assignment: &ConceptAssignment,
    concept: &str,
    n_s: usize,
    seed: u64,
    source: FeatureSource,
) -> Result<ConceptFeatures> {
    let filters = assignment.filters_of(concept);
    ensure(!filters.is_empty(), || format!("concept {concept} has no filters"))?;
    let m = model.bank.per_class();
    let owners: Vec<usize> = {
        let mut o: Vec<usize> = filters.iter().map(|f| f / m).collect();
        o.dedup();
        o.sort();
        o.dedup();
        o
    };
    let mut pool: Vec<usize> = (0..data.len()).filter(|&i| owners.contains(&data.samples[i].label)).collect();
    ensure(!pool.is_empty(), || format!("no images for concept {concept}"))?;
    pool.shuffle(&mut stream_rng(seed, &format!("collect-{concept}")));
    if pool.len() < n_s {
        log::warn!("concept {concept}: {} samples available, {n_s} requested; using all", pool.len());
    }
    pool.truncate(n_s.max(1));
    pool.sort_unstable();

    let mut rows = Vec::with_capacity(pool.len());
    let mut shape = (0, 0, 0);
    for &i in &pool {
        let fwd = model.forward(&stack_images(&[data.tensor(i)])?)?;
        let feats = fwd.features.image(0);
        let sims = fwd.similarities.index_axis(Axis(0), 0).to_owned();
        shape = feats.dim();
        rows.push(concept_row(&feats, &sims, &filters, source));
    }
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(ConceptFeatures {
        concept: concept.to_string(),
        rows: Array2::from_shape_vec((pool.len(), dim), flat).expect("rows share a length"),
        sample_ids: pool.iter().map(|&i| data.samples[i].id).collect(),
        shape,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitSummary {
    pub concept: String,
    pub feature_shape: [usize; 3],
    pub eigenvalues: Vec<f64>,
    pub info_ratios: Vec<f64>,
    pub sample_ids: Vec<usize>,
    /// q-q R^2 of the sample scores on each retained component (absent below 20 samples).
    pub qq_r2: Vec<Option<f64>>,
}

pub fn summarize(features: &ConceptFeatures, space: &TraitSpace, centered: &Array2<f64>) -> TraitSummary {
    let scores = space.scores(centered);
    TraitSummary {
        concept: features.concept.clone(),
        feature_shape: [features.shape.0, features.shape.1, features.shape.2],
        eigenvalues: space.eigenvalues.clone(),
        info_ratios: space.info_ratios.clone(),
        sample_ids: features.sample_ids.clone(),
        qq_r2: scores
            .axis_iter(Axis(1))
            .map(|c| qq_normality_r2(&c.to_vec()).ok())
            .collect(),
    }
}

fn file_stem(concept: &str) -> String {
    concept
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `traits_<concept>.bin` and `traits_<concept>.json`.
pub fn write_traits(dir: &Path, space: &TraitSpace, summary: &TraitSummary) -> Result<()> {
    let stem = format!("traits_{}", file_stem(&summary.concept));
    let (d, k) = space.components.dim();
    let values: Vec<f64> = space.components.iter().copied().collect();
    binfmt::write(&dir.join(format!("{stem}.bin")), &[binfmt::dim_u32(d)?, binfmt::dim_u32(k)?], &values)?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads the component matrix written by [`write_traits`].
pub fn read_trait_components(path: &Path) -> Result<Array2<f64>> {
    let (dims, values) = binfmt::read(path, 2)?;
    Array2::from_shape_vec((dims[0], dims[1]), values).map_err(|e| Error::Format(e.to_string()))
}

/// Per-concept trait summaries keyed by concept name.
pub type TraitIndex = BTreeMap<String, TraitSummary>;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn centering_and_covariance_by_hand() {
        let (c, m) = row_center(&array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.to_vec(), vec![1.5, 3.5]);
        assert_eq!(c, array![[-0.5, 0.5], [-0.5, 0.5]]);
        assert_eq!(sample_covariance(&c).unwrap(), array![[0.5, 0.5], [0.5, 0.5]]);
        assert!(row_center(&array![[1.0, 2.0]]).is_err());
        assert!(sample_covariance(&array![[0.0], [0.0]]).is_err());
    }

    #[test]
    fn ratios() {
        assert_eq!(information_ratio(&[4.0, 0.0], 1), 1.0);
        assert_eq!(information_ratio(&[3.0, 1.0], 1), 0.75);
        assert_eq!(default_k(&[3.0, 1.0]), 2);
        assert_eq!(default_k(&[9.5, 0.5]), 1);
    }

    #[test]
    fn k_clamps_to_rank() {
        let w = array![[1.0, 2.0, 3.0], [2.0, 3.0, 4.0], [0.0, 2.0, 4.0]];
        let (c, _) = row_center(&w).unwrap();
        let p = sample_covariance(&c).unwrap();
        let t = principal_components(&c, &p, 3).unwrap();
        assert_eq!(t.k(), 1);
        assert!((t.info_ratios[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_qq_is_an_error() {
        assert!(qq_normality_r2(&[1.0; 30]).is_err());
        assert!(qq_normality_r2(&[1.0, 2.0]).is_err());
    }
}
