//! SVD rank of per-filter similarity maps and per-concept sensitivity.
//!
//! A filter here is one basis vector: its 7x7 similarity map over an image is
//! the feature map whose rank measures how much structure the filter sees.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::proto_model::BasisBank;
use crate::trainer::ProvenanceRecord;
use crate::util::stream_rng;

/// Singular values at or below `RANK_TOLERANCE * sigma_max` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-6;

fn to_dmatrix(map: ArrayView2<f64>) -> DMatrix<f64> {
    let (h, w) = map.dim();
    DMatrix::from_fn(h, w, |i, j| map[[i, j]])
}

fn check_finite(map: ArrayView2<f64>) -> Result<()> {
    if map.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("feature map".into()))
    }
}

/// Descending singular values.
pub fn singular_values(map: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_finite(map)?;
    let mut s: Vec<f64> = to_dmatrix(map)
        .singular_values()
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Thin SVD `map = u diag(sigma) vt`, singular values descending.
pub struct Decomposition {
    pub u: Array2<f64>,
    pub sigma: Vec<f64>,
    pub vt: Array2<f64>,
}

impl Decomposition {
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut us = self.u.clone();
        for (mut col, s) in us.axis_iter_mut(Axis(1)).zip(&self.sigma) {
            col *= *s;
        }
        us.dot(&self.vt)
    }
}

pub fn decompose(map: ArrayView2<f64>) -> Result<Decomposition> {
    check_finite(map)?;
    let svd = to_dmatrix(map).svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = order.len();
    Ok(Decomposition {
        u: Array2::from_shape_fn((u.nrows(), k), |(i, j)| u[(i, order[j])]),
        sigma: order.iter().map(|&i| svd.singular_values[i]).collect(),
        vt: Array2::from_shape_fn((k, vt.ncols()), |(i, j)| vt[(order[i], j)]),
    })
}

/// Number of singular values above `tol * sigma_max`.
pub fn feature_map_rank(map: ArrayView2<f64>, tol: f64) -> Result<usize> {
    ensure(tol > 0.0 && tol.is_finite(), || format!("rank tolerance must be > 0, got {tol}"))?;
    let s = singular_values(map)?;
    let max = s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > tol * max).count())
}

/// Filter-to-concept grouping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAssignment {
    /// Every concept name, including those left without filters.
    pub concepts: Vec<String>,
    /// Filter (flat basis-vector) index to concept name.
    pub filters: BTreeMap<usize, String>,
    /// Filters excluded because they carry no structure.
    pub redundant: Vec<usize>,
}

impl ConceptAssignment {
    pub fn filters_of(&self, concept: &str) -> Vec<usize> {
        self.filters
            .iter()
            .filter(|(_, c)| c.as_str() == concept)
            .map(|(&f, _)| f)
            .collect()
    }
}

/// Mean rank over each concept's filters. Concepts without filters are absent.
pub fn concept_average_rank(ranks: &[usize], assignment: &ConceptAssignment) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (&f, concept) in &assignment.filters {
        let r = *ranks.get(f).ok_or_else(|| {
            Error::Dimension(format!("filter {f} outside a profile of {} ranks", ranks.len()))
        })?;
        let e = sums.entry(concept.clone()).or_default();
        e.0 += r;
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (sum, k))| (c, sum as f64 / k as f64))
        .collect())
}

/// `R_s / sum R`. All-zero ranks give uniform scores.
pub fn sensitivity_scores(per_concept_rank: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    ensure(!per_concept_rank.is_empty(), || "no concepts to score".into())?;
    let total: f64 = per_concept_rank.values().sum();
    if total <= 0.0 {
        log::warn!("all concept ranks are zero; using uniform sensitivity");
        let u = 1.0 / per_concept_rank.len() as f64;
        return Ok(per_concept_rank.keys().map(|k| (k.clone(), u)).collect());
    }
    Ok(per_concept_rank
        .iter()
        .map(|(k, r)| (k.clone(), r / total))
        .collect())
}

/// PCS weight: score times the number of concepts, so a typical weight is about 1.
pub fn pcs_weights(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let n = scores.len() as f64;
    scores.iter().map(|(k, s)| (k.clone(), s * n)).collect()
}

/// Filters whose map has rank 0 on every probe image. `ranks[image][filter]`.
pub fn redundant_filters(ranks: &[Vec<usize>]) -> Vec<usize> {
    let Some(first) = ranks.first() else {
        return Vec::new();
    };
    (0..first.len())
        .filter(|&f| ranks.iter().all(|r| r.get(f).copied().unwrap_or(0) == 0))
        .collect()
}

pub fn default_concept_name(cluster: usize) -> String {
    format!("concept_{cluster}")
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded spherical k-means; returns one cluster id per point, with clusters
/// numbered by their smallest member index.
pub fn spherical_kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    ensure(k >= 1, || "cluster count must be >= 1".into())?;
    ensure(k <= n, || format!("cluster count {k} exceeds {n} filters"))?;
    let pts: Vec<Vec<f64>> = points.iter().map(|p| unit(p)).collect();
    let mut rng = stream_rng(seed, "assign_concepts");

    // k-means++ on cosine distance
    let mut centers = vec![pts[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d: Vec<f64> = pts
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| (1.0 - dot(p, c)).max(0.0))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &di) in d.iter().enumerate() {
                if di > 0.0 && t < di {
                    chosen = i;
                    break;
                }
                t -= di;
            }
            if d[chosen] == 0.0 {
                chosen = d.iter().rposition(|&v| v > 0.0).expect("positive total");
            }
            chosen
        } else {
            centers.len() % n
        };
        centers.push(pts[pick].clone());
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..100 {
        let next: Vec<usize> = pts
            .iter()
            .map(|p| {
                let mut best = (f64::NEG_INFINITY, 0);
                for (c, ctr) in centers.iter().enumerate() {
                    let s = dot(p, ctr);
                    if s > best.0 {
                        best = (s, c);
                    }
                }
                best.1
            })
            .collect();
        let changed = next != assign;
        assign = next;
        for (c, ctr) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts.iter().zip(&assign).filter(|(_, &a)| a == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mut sum = vec![0.0; ctr.len()];
            for m in members {
                for (s, v) in sum.iter_mut().zip(m) {
                    *s += v;
                }
            }
            *ctr = unit(&sum);
        }
        if !changed {
            break;
        }
    }
    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    for &a in &assign {
        let next = relabel.len();
        relabel.entry(a).or_insert(next);
    }
    Ok(assign.iter().map(|a| relabel[a]).collect())
}

/// Groups the projected basis vectors (each equal to its maximally activating
/// patch) into `cluster_count` concepts. `names` relabels `concept_<k>`.
pub fn assign_concepts(
    bank: &BasisBank,
    provenance: &[ProvenanceRecord],
    cluster_count: usize,
    seed: u64,
    redundant: &[usize],
    names: Option<&BTreeMap<String, String>>,
) -> Result<ConceptAssignment> {
    ensure(provenance.len() == bank.total(), || {
        format!(
            "bank is not projected: {} provenance records for {} basis vectors",
            provenance.len(),
            bank.total()
        )
    })?;
    let excluded: BTreeSet<usize> = redundant.iter().copied().collect();
    let active: Vec<usize> = (0..bank.total()).filter(|f| !excluded.contains(f)).collect();
    ensure(cluster_count <= active.len(), || {
        format!("cluster count {cluster_count} exceeds {} usable filters", active.len())
    })?;
    let points: Vec<Vec<f64>> = active.iter().map(|&f| bank.flat(f).to_vec()).collect();
    let clusters = spherical_kmeans(&points, cluster_count, seed)?;
    let name = |k: usize| {
        let base = default_concept_name(k);
        names.and_then(|m| m.get(&base).cloned()).unwrap_or(base)
    };
    Ok(ConceptAssignment {
        concepts: (0..cluster_count).map(name).collect(),
        filters: active.iter().zip(&clusters).map(|(&f, &c)| (f, name(c))).collect(),
        redundant: excluded.into_iter().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRank {
    pub filters: Vec<usize>,
    #[serde(rename = "R_s")]
    pub r_s: f64,
    pub score: f64,
}

/// Rank analysis of one image; serializes as `rank_profile.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankProfile {
    pub image_id: usize,
    pub per_filter_rank: Vec<usize>,
    pub concepts: BTreeMap<String, ConceptRank>,
    /// Concepts with no assigned filters.
    pub absent: Vec<String>,
    pub redundant: Vec<usize>,
    pub rank_tolerance: f64,
}

impl RankProfile {
    pub fn per_concept_rank(&self) -> BTreeMap<String, f64> {
        self.concepts.iter().map(|(k, c)| (k.clone(), c.r_s)).collect()
    }

    pub fn scores(&self) -> BTreeMap<String, f64> {
        self.concepts.iter().map(|(k, c)| (k.clone(), c.score)).collect()
    }
}

/// Ranks of each filter map of one image, `maps` is `[filters, H, W]`.
pub fn filter_ranks(maps: ArrayView3<f64>, tol: f64) -> Result<Vec<usize>> {
    maps.outer_iter().map(|m| feature_map_rank(m, tol)).collect()
}

pub fn rank_profile(
    image_id: usize,
    maps: ArrayView3<f64>,
    assignment: &ConceptAssignment,
    tol: f64,
) -> Result<RankProfile> {
    let ranks = filter_ranks(maps, tol)?;
    let means = concept_average_rank(&ranks, assignment)?;
    let scores = sensitivity_scores(&means)?;
    let concepts = means
        .iter()
        .map(|(k, &r_s)| {
            (
                k.clone(),
                ConceptRank {
                    filters: assignment.filters_of(k),
                    r_s,
                    score: scores[k],
                },
            )
        })
        .collect();
    Ok(RankProfile {
        image_id,
        per_filter_rank: ranks,
        concepts,
        absent: assignment
            .concepts
            .iter()
            .filter(|c| !means.contains_key(*c))
            .cloned()
            .collect(),
        redundant: assignment.redundant.clone(),
        rank_tolerance: tol,
    })
}

/// Element-wise mean of per-image concept ranks, then normalized scores.
pub fn mean_scores(profiles: &[RankProfile]) -> Result<BTreeMap<String, f64>> {
    ensure(!profiles.is_empty(), || "no rank profiles".into())?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for p in profiles {
        for (k, c) in &p.concepts {
            let e = sums.entry(k.clone()).or_default();
            e.0 += c.r_s;
            e.1 += 1;
        }
    }
    let means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    sensitivity_scores(&means)
}
