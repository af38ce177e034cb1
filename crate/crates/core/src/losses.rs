//! Loss terms of the Proto-CNN objective and their gradients.
//!
//! Every loss that reads feature patches takes them as per-sample patch
//! matrices `[H*W, D]`; the `FeatureMap` entry points are thin wrappers.
//! Gradients are returned with respect to the basis bank (and the patches
//! where they are needed for the add-on backward pass). Where a loss selects a
//! pair by `min`/`max`, ties go to the lowest basis index, then the lowest
//! patch index, and the gradient flows through that pair only.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::proto_model::similarity::cosine_matrix;
use crate::proto_model::{cosine_grad, softmax_rows, BasisBank, ClassifierHead, FeatureMap};
use crate::util::stream_rng;

pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// orthogonality
    pub lambda1: f64,
    /// subspace separation
    pub lambda2: f64,
    /// separation
    pub lambda3: f64,
    /// aggregation
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: -1e-7,
            lambda3: -0.08,
            lambda4: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub sigma: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { sigma: 0.01 }
    }
}

/// The five loss values of one evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub l_orth: f64,
    pub l_ss: f64,
    pub l_sep: f64,
    pub l_agg: f64,
}

impl LossTerms {
    pub fn total(&self, w: &LossWeights) -> f64 {
        total_loss(self.ce, self.l_orth, self.l_ss, self.l_sep, self.l_agg, w)
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.l_orth, self.l_ss, self.l_sep, self.l_agg]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn total_loss(ce: f64, l_orth: f64, l_ss: f64, l_sep: f64, l_agg: f64, w: &LossWeights) -> f64 {
    ce + w.lambda1 * l_orth + w.lambda2 * l_ss + w.lambda3 * l_sep + w.lambda4 * l_agg
}

/// `a_j + sigma * eps` with `eps ~ N(0, I)`, one fresh draw per entry.
pub fn perturb_basis_with<R: Rng + ?Sized>(bank: &BasisBank, sigma: f64, rng: &mut R) -> BasisBank {
    let mut out = bank.clone();
    if sigma != 0.0 {
        for v in out.vectors.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sigma * e;
        }
    }
    out
}

pub fn perturb_basis(bank: &BasisBank, cfg: &PerturbationConfig, seed: u64) -> Result<BasisBank> {
    ensure(cfg.sigma.is_finite() && cfg.sigma >= 0.0, || {
        format!("sigma must be finite and >= 0, got {}", cfg.sigma)
    })?;
    let mut rng = stream_rng(seed, "perturb_basis");
    Ok(perturb_basis_with(bank, cfg.sigma, &mut rng))
}

/// Loss value with gradients for the bank `[C, M, D]` and each sample's patches.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub d_bank: Array3<f64>,
    pub d_patches: Vec<Array2<f64>>,
}

impl LossGrad {
    fn zeros(bank: &BasisBank, patches: &[Array2<f64>]) -> Self {
        Self {
            value: 0.0,
            d_bank: Array3::zeros(bank.vectors.raw_dim()),
            d_patches: patches.iter().map(|p| Array2::zeros(p.raw_dim())).collect(),
        }
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} samples", labels.len())));
    }
    if n == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn check_dims(patches: &[Array2<f64>], bank: &BasisBank) -> Result<()> {
    for p in patches {
        if p.ncols() != bank.dim() {
            return Err(Error::Dimension(format!(
                "patch dim {} vs basis dim {}",
                p.ncols(),
                bank.dim()
            )));
        }
    }
    Ok(())
}

/// Extremal cosine between the patches and a subset of basis vectors.
/// Returns `(value, flat basis index, patch index)`.
fn extremal_pair(
    patches: &Array2<f64>,
    bank: &BasisBank,
    candidates: &[usize],
    maximize: bool,
) -> (f64, usize, usize) {
    let flat = bank.flat_matrix().select(Axis(0), candidates);
    let cos = cosine_matrix(patches, &flat);
    let mut best = if maximize { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut best_k = candidates[0];
    let mut best_p = 0;
    for (ci, &k) in candidates.iter().enumerate() {
        for p in 0..patches.nrows() {
            let v = cos[[p, ci]];
            let better = if maximize { v > best } else { v < best };
            if better {
                best = v;
                best_k = k;
                best_p = p;
            }
        }
    }
    (best, best_k, best_p)
}

fn own_class(bank: &BasisBank, c: usize) -> Vec<usize> {
    let m = bank.per_class();
    (c * m..(c + 1) * m).collect()
}

fn other_classes(bank: &BasisBank, c: usize) -> Vec<usize> {
    (0..bank.total()).filter(|&k| bank.class_of(k) != c).collect()
}

fn add_pair_grad(
    out: &mut LossGrad,
    bank: &BasisBank,
    patches: &[Array2<f64>],
    sample: usize,
    k: usize,
    p: usize,
    scale: f64,
) {
    let m = bank.per_class();
    let (da, dp) = cosine_grad(bank.flat(k), patches[sample].row(p));
    let mut bank_row = out
        .d_bank
        .index_axis_mut(Axis(0), k / m)
        .index_axis_move(Axis(0), k % m);
    bank_row.scaled_add(scale, &da);
    out.d_patches[sample].row_mut(p).scaled_add(scale, &dp);
}

/// Mean over samples of `min_j min_P -cos(a_j', P)` over the sample's own-class vectors.
pub fn aggregation_loss_grad(
    patches: &[Array2<f64>],
    labels: &[usize],
    bank: &BasisBank,
) -> Result<LossGrad> {
    check_labels(labels, patches.len(), bank.num_classes())?;
    check_dims(patches, bank)?;
    let n = patches.len() as f64;
    let mut out = LossGrad::zeros(bank, patches);
    for (i, (pm, &y)) in patches.iter().zip(labels).enumerate() {
        let (best, k, p) = extremal_pair(pm, bank, &own_class(bank, y), true);
        out.value -= best / n;
        add_pair_grad(&mut out, bank, patches, i, k, p, -1.0 / n);
    }
    Ok(out)
}

/// Mean over samples of `min_j min_P cos(a_j', P)` over vectors of other classes.
pub fn separation_loss_grad(
    patches: &[Array2<f64>],
    labels: &[usize],
    bank: &BasisBank,
) -> Result<LossGrad> {
    ensure(bank.num_classes() >= 2, || {
        "separation loss needs at least two classes".into()
    })?;
    check_labels(labels, patches.len(), bank.num_classes())?;
    check_dims(patches, bank)?;
    let n = patches.len() as f64;
    let mut out = LossGrad::zeros(bank, patches);
    for (i, (pm, &y)) in patches.iter().zip(labels).enumerate() {
        let (best, k, p) = extremal_pair(pm, bank, &other_classes(bank, y), false);
        out.value += best / n;
        add_pair_grad(&mut out, bank, patches, i, k, p, 1.0 / n);
    }
    Ok(out)
}

fn fmap_patches(fmaps: &FeatureMap) -> Vec<Array2<f64>> {
    (0..fmaps.batch()).map(|b| fmaps.patch_matrix(b)).collect()
}

pub fn aggregation_loss(fmaps: &FeatureMap, labels: &[usize], bank: &BasisBank) -> Result<f64> {
    aggregation_loss_grad(&fmap_patches(fmaps), labels, bank).map(|g| g.value)
}

pub fn separation_loss(fmaps: &FeatureMap, labels: &[usize], bank: &BasisBank) -> Result<f64> {
    separation_loss_grad(&fmap_patches(fmaps), labels, bank).map(|g| g.value)
}

/// `sum_c ||A_c A_c^T - I||_F^2` and its gradient `4 (A A^T - I) A` per class.
pub fn orthogonality_loss_grad(bank: &BasisBank) -> (f64, Array3<f64>) {
    let mut grad = Array3::zeros(bank.vectors.raw_dim());
    let mut value = 0.0;
    for c in 0..bank.num_classes() {
        let a = bank.class_matrix(c);
        let mut g = a.dot(&a.t());
        for i in 0..g.nrows() {
            g[[i, i]] -= 1.0;
        }
        value += g.iter().map(|v| v * v).sum::<f64>();
        grad.index_axis_mut(Axis(0), c).assign(&(g.dot(&a) * 4.0));
    }
    (value, grad)
}

pub fn orthogonality_loss(bank: &BasisBank) -> f64 {
    orthogonality_loss_grad(bank).0
}

/// Per-class `||A_c A_c^T - I||_F^2`.
pub fn orthogonality_per_class(bank: &BasisBank) -> Vec<f64> {
    (0..bank.num_classes())
        .map(|c| {
            let a = bank.class_matrix(c);
            let mut g = a.dot(&a.t());
            for i in 0..g.nrows() {
                g[[i, i]] -= 1.0;
            }
            g.iter().map(|v| v * v).sum()
        })
        .collect()
}

/// `-(1/sqrt 2) sum_{c1<c2} ||A_c1^T A_c1 - A_c2^T A_c2||_F` with gradient.
pub fn subspace_separation_loss_grad(bank: &BasisBank) -> Result<(f64, Array3<f64>)> {
    let c = bank.num_classes();
    ensure(c >= 2, || format!("subspace separation needs C >= 2, got {c}"))?;
    let projectors: Vec<Array2<f64>> = (0..c)
        .map(|i| {
            let a = bank.class_matrix(i);
            a.t().dot(&a)
        })
        .collect();
    let scale = -1.0 / 2f64.sqrt();
    let mut value = 0.0;
    let mut grad = Array3::zeros(bank.vectors.raw_dim());
    for c1 in 0..c {
        for c2 in (c1 + 1)..c {
            let delta = &projectors[c1] - &projectors[c2];
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            value += scale * norm;
            if norm > 0.0 {
                let g1 = bank.class_matrix(c1).dot(&delta) * (2.0 * scale / norm);
                let g2 = bank.class_matrix(c2).dot(&delta) * (-2.0 * scale / norm);
                let mut slot = grad.index_axis_mut(Axis(0), c1);
                slot += &g1;
                let mut slot = grad.index_axis_mut(Axis(0), c2);
                slot += &g2;
            }
        }
    }
    Ok((value, grad))
}

pub fn subspace_separation_loss(bank: &BasisBank) -> Result<f64> {
    subspace_separation_loss_grad(bank).map(|(v, _)| v)
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Array2<f64>> {
    check_labels(labels, labels.len(), classes)?;
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    Ok(out)
}

/// `-(1/n) sum_i sum_c y_ic log(max(phi_c, 1e-12))`.
pub fn cross_entropy_loss(probs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if probs.dim() != targets.dim() {
        return Err(Error::Dimension(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dim(),
            targets.dim()
        )));
    }
    let n = probs.nrows();
    ensure(n > 0, || "empty batch".into())?;
    let mut acc = 0.0;
    for (p, y) in probs.iter().zip(targets.iter()) {
        if *y != 0.0 {
            acc -= y * p.max(LOG_EPS).ln();
        }
    }
    Ok(acc / n as f64)
}

/// Cross-entropy of the full classification path with gradients for the bank,
/// the patches and the head weights.
#[derive(Debug, Clone)]
pub struct ClassificationGrad {
    pub loss: LossGrad,
    pub d_head: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub pooled: Array2<f64>,
}

pub fn classification_loss_grad(
    patches: &[Array2<f64>],
    labels: &[usize],
    bank: &BasisBank,
    head: &ClassifierHead,
) -> Result<ClassificationGrad> {
    let classes = bank.num_classes();
    check_labels(labels, patches.len(), classes)?;
    check_dims(patches, bank)?;
    let n = patches.len();
    let k_total = bank.total();
    let flat = bank.flat_matrix();
    let mut pooled = Array2::zeros((n, k_total));
    let mut argmax = Array2::<usize>::zeros((n, k_total));
    for (i, pm) in patches.iter().enumerate() {
        let cos = cosine_matrix(pm, &flat);
        for k in 0..k_total {
            let mut best = f64::NEG_INFINITY;
            for p in 0..pm.nrows() {
                if cos[[p, k]] > best {
                    best = cos[[p, k]];
                    argmax[[i, k]] = p;
                }
            }
            pooled[[i, k]] = best;
        }
    }
    let logits = pooled.dot(&head.weights.t());
    let probabilities = softmax_rows(&logits);
    let targets = one_hot(labels, classes)?;
    let value = cross_entropy_loss(&probabilities, &targets)?;
    let dlogits = (&probabilities - &targets) / n as f64;
    let d_head = dlogits.t().dot(&pooled);
    let dpooled = dlogits.dot(&head.weights);
    let mut loss = LossGrad::zeros(bank, patches);
    loss.value = value;
    for i in 0..n {
        for k in 0..k_total {
            let g = dpooled[[i, k]];
            if g != 0.0 {
                add_pair_grad(&mut loss, bank, patches, i, k, argmax[[i, k]], g);
            }
        }
    }
    Ok(ClassificationGrad {
        loss,
        d_head,
        probabilities,
        pooled,
    })
}

/// All five terms on one batch. `perturbed` is the noisy bank used by the
/// aggregation and separation terms; the others read `bank`.
pub struct JointGrad {
    pub terms: LossTerms,
    pub d_bank: Array3<f64>,
    pub d_patches: Vec<Array2<f64>>,
    pub d_head: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub pooled: Array2<f64>,
}

pub fn joint_loss_grad(
    patches: &[Array2<f64>],
    labels: &[usize],
    bank: &BasisBank,
    perturbed: &BasisBank,
    head: &ClassifierHead,
    w: &LossWeights,
) -> Result<JointGrad> {
    let ce = classification_loss_grad(patches, labels, bank, head)?;
    let agg = aggregation_loss_grad(patches, labels, perturbed)?;
    let sep = separation_loss_grad(patches, labels, perturbed)?;
    let (l_orth, g_orth) = orthogonality_loss_grad(bank);
    let (l_ss, g_ss) = subspace_separation_loss_grad(bank)?;
    let terms = LossTerms {
        ce: ce.loss.value,
        l_orth,
        l_ss,
        l_sep: sep.value,
        l_agg: agg.value,
    };
    let d_bank = &ce.loss.d_bank
        + &(g_orth * w.lambda1)
        + &(g_ss * w.lambda2)
        + &(&sep.d_bank * w.lambda3)
        + &(&agg.d_bank * w.lambda4);
    let d_patches = ce
        .loss
        .d_patches
        .iter()
        .zip(&sep.d_patches)
        .zip(&agg.d_patches)
        .map(|((c, s), a)| c + &(s * w.lambda3) + &(a * w.lambda4))
        .collect();
    Ok(JointGrad {
        terms,
        d_bank,
        d_patches,
        d_head: ce.d_head,
        probabilities: ce.probabilities,
        pooled: ce.pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn bank(v: Array3<f64>) -> BasisBank {
        let c = v.dim().0;
        BasisBank::new(v, (0..c).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.lambda4), (1.0, -1e-7, -0.08, 0.8));
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert_eq!(total_loss(1.0, 0.0, 0.0, 0.0, 0.0, &w), 1.0);
        let t = total_loss(0.5, 2.0, -1.0, -0.3, -0.8, &w);
        assert!((t - 1.8840001).abs() < 1e-12, "{t}");
    }

    #[test]
    fn perturb_zero_sigma_is_identity_and_seeded() {
        let b = bank(Array3::from_elem((2, 2, 3), 0.5));
        let p = perturb_basis(&b, &PerturbationConfig { sigma: 0.0 }, 7).unwrap();
        assert_eq!(p, b);
        let cfg = PerturbationConfig::default();
        assert_eq!(perturb_basis(&b, &cfg, 3).unwrap(), perturb_basis(&b, &cfg, 3).unwrap());
        assert!(perturb_basis(&b, &PerturbationConfig { sigma: f64::NAN }, 3).is_err());
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        let b = bank(Array3::from_elem((4, 50, 64), 0.25));
        let p = perturb_basis(&b, &PerturbationConfig::default(), 11).unwrap();
        let dev: Vec<f64> = p.vectors.iter().map(|v| v - 0.25).collect();
        let n = dev.len() as f64;
        let mean = dev.iter().sum::<f64>() / n;
        let std = (dev.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 0.01).abs() < 0.001, "{std}");
    }

    #[test]
    fn aggregation_simple_cases() {
        let b = bank(array![[[1.0, 0.0]], [[0.0, 1.0]]]);
        let same = vec![array![[2.0, 0.0]]];
        let v = aggregation_loss_grad(&same, &[0], &b).unwrap().value;
        assert!((v + 1.0).abs() < 1e-12);
        let orth = vec![array![[0.0, 3.0]]];
        assert!(aggregation_loss_grad(&orth, &[0], &b).unwrap().value.abs() < 1e-12);
        assert!(matches!(aggregation_loss_grad(&orth, &[5], &b), Err(Error::Validation(_))));
    }

    #[test]
    fn separation_simple_cases() {
        let b = bank(array![[[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]]]);
        // wrong-class vector equals one patch, another patch is orthogonal: min picks 0
        let pm = vec![array![[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]];
        assert!(separation_loss_grad(&pm, &[0], &b).unwrap().value.abs() < 1e-12);
        let single = bank(array![[[1.0, 0.0, 0.0]]]);
        assert!(separation_loss_grad(&pm, &[0], &single).is_err());
    }

    #[test]
    fn orthogonality_cases() {
        let eye = bank(array![[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]]);
        assert_eq!(orthogonality_loss(&eye), 0.0);
        let dup = bank(array![[[1.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]]]);
        assert!((orthogonality_loss(&dup) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn subspace_separation_cases() {
        let b = bank(array![[[1.0, 0.0]], [[0.0, 1.0]]]);
        assert!((subspace_separation_loss(&b).unwrap() + 1.0).abs() < 1e-12);
        let same = bank(array![[[0.6, 0.8]], [[0.6, 0.8]]]);
        assert_eq!(subspace_separation_loss(&same).unwrap(), 0.0);
        let one = bank(array![[[0.6, 0.8]]]);
        assert!(subspace_separation_loss(&one).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let perfect = array![[1.0, 0.0], [0.0, 1.0]];
        let y = one_hot(&[0, 1], 2).unwrap();
        assert_eq!(cross_entropy_loss(&perfect, &y).unwrap(), 0.0);
        let uniform = array![[0.5, 0.5]];
        let y = one_hot(&[1], 2).unwrap();
        assert!((cross_entropy_loss(&uniform, &y).unwrap() - 2f64.ln()).abs() < 1e-12);
        let wrong = array![[1.0, 0.0]];
        let v = cross_entropy_loss(&wrong, &y).unwrap();
        assert!((v - (-(LOG_EPS.ln()))).abs() < 1e-9);
    }
}
