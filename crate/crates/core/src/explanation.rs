//! Semantic probabilities, PCS values, similarity histograms and rule-driven
//! explanation sentences.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::proto_model::{stack_images, ClassifierHead, ProtoModel};
use crate::rank_sensitivity::{pcs_weights, rank_profile, ConceptAssignment, RANK_TOLERANCE};

/// Normal fit of one concept's activation over the training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptDistribution {
    pub mean: f64,
    pub std: f64,
    pub a_min: f64,
    pub a_max: f64,
}

pub fn fit_concept_distribution(values: &[f64]) -> Result<ConceptDistribution> {
    let n = values.len();
    ensure(n >= 20, || format!("need at least 20 activations to fit, got {n}"))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("concept activations".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let a_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let a_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if var <= 0.0 || a_min >= a_max {
        return Err(Error::Validation("constant activations have no spread to fit".into()));
    }
    Ok(ConceptDistribution {
        mean,
        std: var.sqrt(),
        a_min,
        a_max,
    })
}

/// `(cdf(a) - cdf(A_min)) / (cdf(A_max) - cdf(A_min))`, clamped to `[0, 1]`.
pub fn semantic_probability(a_s: f64, dist: &ConceptDistribution) -> f64 {
    if a_s.is_nan() {
        return 0.0;
    }
    let Ok(normal) = Normal::new(dist.mean, dist.std) else {
        return 0.0;
    };
    let lo = normal.cdf(dist.a_min);
    let hi = normal.cdf(dist.a_max);
    let p = if hi > lo {
        (normal.cdf(a_s) - lo) / (hi - lo)
    } else {
        (a_s - dist.a_min) / (dist.a_max - dist.a_min)
    };
    p.clamp(0.0, 1.0)
}

/// Principal component score: semantic probability times concept weight.
pub fn pcs(p_s: f64, weight: f64) -> f64 {
    p_s * weight
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub delta_max_pcs: f64,
    pub pcs_max: f64,
    pub delta_pcs: BTreeMap<String, f64>,
}

/// Per-concept PCS differences between the first (predicted) and second
/// (runner-up) class. Concepts missing from one side count as 0.
pub fn compute_deltas(pcs_by_class: &[BTreeMap<String, f64>]) -> Result<Deltas> {
    ensure(pcs_by_class.len() >= 2, || "deltas need at least two candidate classes".into())?;
    let (pred, other) = (&pcs_by_class[0], &pcs_by_class[1]);
    let mut delta_pcs = BTreeMap::new();
    for k in pred.keys().chain(other.keys()) {
        let d = pred.get(k).copied().unwrap_or(0.0) - other.get(k).copied().unwrap_or(0.0);
        delta_pcs.insert(k.clone(), d);
    }
    let delta_max_pcs = delta_pcs.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let pcs_max = pcs_by_class
        .iter()
        .flat_map(|m| m.values().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Deltas {
        delta_max_pcs: if delta_max_pcs.is_finite() { delta_max_pcs } else { 0.0 },
        pcs_max: if pcs_max.is_finite() { pcs_max } else { 0.0 },
        delta_pcs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assessment {
    NotSure,
    NotSureBecause,
    Probably,
    Sure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Semanteme {
    Confusing,
    SomethingLike,
    Perhaps,
    Obviously,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Vivid,
    Be,
}

/// Bands are `[lo, hi)`; the top band is closed, so 0.1, 0.35 and 0.5 fall upward.
fn band(v: f64) -> usize {
    if v < 0.1 {
        0
    } else if v < 0.35 {
        1
    } else if v < 0.5 {
        2
    } else {
        3
    }
}

pub fn assessment_band(delta_max_pcs: f64) -> Assessment {
    [Assessment::NotSure, Assessment::NotSureBecause, Assessment::Probably, Assessment::Sure][band(delta_max_pcs)]
}

pub fn semanteme_band(delta_pcs: f64) -> Semanteme {
    [Semanteme::Confusing, Semanteme::SomethingLike, Semanteme::Perhaps, Semanteme::Obviously][band(delta_pcs)]
}

pub fn position_word(pcs_max: f64) -> Position {
    if pcs_max >= 0.5 {
        Position::Vivid
    } else {
        Position::Be
    }
}

/// Sentence templates, editable as `templates.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub assessment: BTreeMap<Assessment, String>,
    pub position: BTreeMap<Position, String>,
    pub semanteme: BTreeMap<Semanteme, String>,
    /// Prefix of the 2nd, 3rd, ... phrase; the last entry repeats.
    pub connectives: Vec<String>,
    pub closing: String,
}

impl Default for Templates {
    fn default() -> Self {
        let s = |v: &str| v.to_string();
        Self {
            assessment: [
                (Assessment::NotSure, s("I am not sure whether this is a {pred} or a {other}.")),
                (Assessment::NotSureBecause, s("I am not sure whether this is a {pred} mainly because")),
                (Assessment::Probably, s("It is probably a {pred} mainly because")),
                (Assessment::Sure, s("I am sure it is a {pred} mainly because")),
            ]
            .into(),
            position: [(Position::Vivid, s("vivid ")), (Position::Be, s(""))].into(),
            semanteme: [
                (Semanteme::Obviously, s("it has a {position}{concept}, which is a {pred}'s {concept} obviously")),
                (Semanteme::Perhaps, s("it has a {position}{concept}, which is perhaps a {pred}'s {concept}")),
                (Semanteme::SomethingLike, s("it has a {position}{concept}, which is something like a {pred}'s {concept}")),
                (Semanteme::Confusing, s("it seems to have a confusing {concept}")),
            ]
            .into(),
            connectives: vec![s("Meanwhile, "), s("In addition, ")],
            closing: s("The {pred} shows a higher semantic similarity score."),
        }
    }
}

impl Templates {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Templates = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        for a in [Assessment::NotSure, Assessment::NotSureBecause, Assessment::Probably, Assessment::Sure] {
            ensure(self.assessment.contains_key(&a), || format!("templates lack assessment {a:?}"))?;
        }
        for s in [Semanteme::Confusing, Semanteme::SomethingLike, Semanteme::Perhaps, Semanteme::Obviously] {
            ensure(self.semanteme.contains_key(&s), || format!("templates lack semanteme {s:?}"))?;
        }
        for p in [Position::Vivid, Position::Be] {
            ensure(self.position.contains_key(&p), || format!("templates lack position {p:?}"))?;
        }
        Ok(())
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phrase {
    pub concept: String,
    pub pcs: f64,
    pub delta_pcs: f64,
    pub position: Position,
    pub semanteme: Semanteme,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub assessment: Assessment,
    pub assessment_text: String,
    pub phrases: Vec<Phrase>,
    pub verdict: String,
}

/// Instantiates the templates. Phrases follow descending PCS of the named class;
/// the lowest band yields the assessment sentence alone.
pub fn generate_explanation(
    pred: &str,
    other: &str,
    pred_pcs: &BTreeMap<String, f64>,
    deltas: &Deltas,
    templates: &Templates,
) -> Explanation {
    let assessment = assessment_band(deltas.delta_max_pcs);
    let position = position_word(deltas.pcs_max);
    let assessment_text = fill(&templates.assessment[&assessment], &[("pred", pred), ("other", other)]);
    let mut concepts: Vec<(&String, f64)> = deltas
        .delta_pcs
        .keys()
        .map(|k| (k, pred_pcs.get(k).copied().unwrap_or(0.0)))
        .collect();
    concepts.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let position_text = &templates.position[&position];
    let phrases: Vec<Phrase> = concepts
        .into_iter()
        .map(|(concept, p)| {
            let d = deltas.delta_pcs[concept];
            let semanteme = semanteme_band(d);
            let text = fill(
                &templates.semanteme[&semanteme],
                &[("position", position_text), ("concept", concept), ("pred", pred), ("other", other)],
            );
            Phrase {
                concept: concept.clone(),
                pcs: p,
                delta_pcs: d,
                position,
                semanteme,
                text,
            }
        })
        .collect();
    let verdict = if assessment == Assessment::NotSure || phrases.is_empty() {
        assessment_text.clone()
    } else {
        let mut v = format!("{assessment_text} {}.", phrases[0].text);
        for (i, p) in phrases.iter().enumerate().skip(1) {
            let conn = templates
                .connectives
                .get(i - 1)
                .or(templates.connectives.last())
                .cloned()
                .unwrap_or_default();
            let body = if conn.is_empty() { capitalize(&p.text) } else { p.text.clone() };
            v.push_str(&format!(" {conn}{body}."));
        }
        let closing = fill(&templates.closing, &[("pred", pred), ("other", other)]);
        if !closing.is_empty() {
            v.push(' ');
            v.push_str(&closing);
        }
        v
    };
    Explanation {
        assessment,
        assessment_text,
        phrases,
        verdict,
    }
}

/// Per-class sums of max-pooled similarities weighted by the head.
pub fn global_similarity_histogram(pooled: ArrayView1<f64>, head: &ClassifierHead) -> Result<Array1<f64>> {
    if pooled.len() != head.weights.ncols() {
        return Err(Error::Dimension(format!(
            "{} pooled scores for a head over {} basis vectors",
            pooled.len(),
            head.weights.ncols()
        )));
    }
    Ok(head.weights.dot(&pooled))
}

/// Head-weighted mean pooled similarity of a concept's filters toward `class`.
pub fn concept_activation(pooled: ArrayView1<f64>, head: &ClassifierHead, class: usize, filters: &[usize]) -> f64 {
    if filters.is_empty() {
        return 0.0;
    }
    filters.iter().map(|&f| head.weights[[class, f]] * pooled[f]).sum::<f64>() / filters.len() as f64
}

/// Fitted concept distributions, saved beside a checkpoint as `concepts.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptModel {
    pub assignment: ConceptAssignment,
    /// class name -> concept -> distribution
    pub distributions: BTreeMap<String, BTreeMap<String, ConceptDistribution>>,
    pub rank_tolerance: f64,
}

/// Fits one distribution per (class, concept) over that class's training images.
/// Pairs with a constant activation carry no evidence and are left out.
pub fn fit_concept_model(model: &ProtoModel, data: &Dataset, assignment: &ConceptAssignment) -> Result<ConceptModel> {
    let mut pooled_by_class: Vec<Vec<Array1<f64>>> = vec![Vec::new(); data.num_classes()];
    for i in 0..data.len() {
        let fwd = model.forward(&stack_images(&[data.tensor(i)])?)?;
        pooled_by_class[data.samples[i].label].push(fwd.pooled.row(0).to_owned());
    }
    let mut distributions = BTreeMap::new();
    for (c, name) in data.classes.iter().enumerate() {
        let mut per = BTreeMap::new();
        for concept in &assignment.concepts {
            let filters = assignment.filters_of(concept);
            if filters.is_empty() {
                continue;
            }
            let values: Vec<f64> = pooled_by_class[c]
                .iter()
                .map(|p| concept_activation(p.view(), &model.head, c, &filters))
                .collect();
            if !values.is_empty() && values.iter().all(|&v| v == values[0]) {
                log::warn!("class {name}, concept {concept}: constant activation, concept left out");
                continue;
            }
            let dist = fit_concept_distribution(&values)
                .map_err(|e| Error::Validation(format!("class {name}, concept {concept}: {e}")))?;
            per.insert(concept.clone(), dist);
        }
        distributions.insert(name.clone(), per);
    }
    Ok(ConceptModel {
        assignment: assignment.clone(),
        distributions,
        rank_tolerance: RANK_TOLERANCE,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub activation: f64,
    pub p_s: f64,
    /// Rank-sensitivity weight.
    pub weight: f64,
    pub pcs: f64,
}

/// Bubble-ring data for one candidate class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConcepts {
    pub class: String,
    pub concepts: BTreeMap<String, ConceptScore>,
    pub total_pcs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub image: String,
    /// Highest-probability class of the classifier.
    pub predicted_class: String,
    pub probabilities: Vec<ClassScore>,
    /// The two highest-probability classes, ordered by summed PCS; the first is the one explained.
    pub bubble_ring: Vec<ClassConcepts>,
    pub delta_max_pcs: f64,
    pub pcs_max: f64,
    pub delta_pcs: BTreeMap<String, f64>,
    pub explanation: Explanation,
    pub global_similarity: Vec<ClassScore>,
}

impl ExplanationReport {
    pub fn explained_class(&self) -> &str {
        &self.bubble_ring[0].class
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn top_two(values: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    (idx[0], idx[1])
}

/// Full explanation of one normalized `[3, 224, 224]` image.
pub fn explain_image(
    model: &ProtoModel,
    concepts: &ConceptModel,
    image: &Array3<f64>,
    name: &str,
    templates: &Templates,
) -> Result<ExplanationReport> {
    let classes = model.class_labels().to_vec();
    ensure(classes.len() >= 2, || "explanation needs at least two classes".into())?;
    let fwd = model.forward(&stack_images(std::slice::from_ref(image))?)?;
    let pooled = fwd.pooled.row(0);
    let probs: Vec<f64> = fwd.probabilities.row(0).to_vec();
    let sims = fwd.similarities.index_axis(Axis(0), 0);
    let profile = rank_profile(0, sims, &concepts.assignment, concepts.rank_tolerance)?;
    let weights = pcs_weights(&profile.scores());

    let score_class = |c: usize| -> Result<ClassConcepts> {
        let dists = concepts.distributions.get(&classes[c]).ok_or_else(|| {
            Error::Validation(format!("no concept distributions for class {}", classes[c]))
        })?;
        let mut out = BTreeMap::new();
        for (concept, dist) in dists {
            let filters = concepts.assignment.filters_of(concept);
            let activation = concept_activation(pooled, &model.head, c, &filters);
            let p_s = semantic_probability(activation, dist);
            let weight = weights.get(concept).copied().unwrap_or(0.0);
            out.insert(
                concept.clone(),
                ConceptScore {
                    activation,
                    p_s,
                    weight,
                    pcs: pcs(p_s, weight),
                },
            );
        }
        let total_pcs = out.values().map(|s| s.pcs).sum();
        Ok(ClassConcepts {
            class: classes[c].clone(),
            concepts: out,
            total_pcs,
        })
    };
    let (first, second) = top_two(&probs);
    let mut ring = vec![score_class(first)?, score_class(second)?];
    if ring[1].total_pcs > ring[0].total_pcs {
        ring.swap(0, 1);
    }
    let pcs_maps: Vec<BTreeMap<String, f64>> = ring
        .iter()
        .map(|r| r.concepts.iter().map(|(k, s)| (k.clone(), s.pcs)).collect())
        .collect();
    let deltas = compute_deltas(&pcs_maps)?;
    let explanation = generate_explanation(&ring[0].class, &ring[1].class, &pcs_maps[0], &deltas, templates);
    let hist = global_similarity_histogram(pooled, &model.head)?;
    Ok(ExplanationReport {
        image: name.to_string(),
        predicted_class: classes[first].clone(),
        probabilities: classes
            .iter()
            .zip(&probs)
            .map(|(c, &p)| ClassScore { class: c.clone(), score: p })
            .collect(),
        bubble_ring: ring,
        delta_max_pcs: deltas.delta_max_pcs,
        pcs_max: deltas.pcs_max,
        delta_pcs: deltas.delta_pcs,
        explanation,
        global_similarity: classes
            .iter()
            .zip(hist.iter())
            .map(|(c, &s)| ClassScore { class: c.clone(), score: s })
            .collect(),
    })
}

fn rgb_to_hsv(px: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = px.map(|v| v as f64 / 255.0);
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
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub const HSV_WEIGHTS: [f64; 3] = [0.2, 0.3, 0.5];
const SSIM_WINDOW: u32 = 8;
const SSIM_STRIDE: u32 = 4;

fn ssim_window(a: &[f64], b: &[f64]) -> f64 {
    const C1: f64 = 1e-4;
    const C2: f64 = 9e-4;
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
    let (va, vb, cov) = (va / denom, vb / denom, cov / denom);
    ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))
}

/// SSIM-style structural similarity in HSV, averaged over sliding windows and
/// weighted across H, S and V.
pub fn hsv_similarity(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Validation(format!(
            "region sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    let (w, h) = a.dimensions();
    ensure(w >= 1 && h >= 1, || "empty region".into())?;
    let ha: Vec<[f64; 3]> = a.pixels().map(|p| rgb_to_hsv(p.0)).collect();
    let hb: Vec<[f64; 3]> = b.pixels().map(|p| rgb_to_hsv(p.0)).collect();
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let starts = |len: u32, win: u32| -> Vec<u32> {
        let mut s: Vec<u32> = (0..=len - win).step_by(SSIM_STRIDE as usize).collect();
        if *s.last().expect("non-empty") != len - win {
            s.push(len - win);
        }
        s
    };
    let mut total = 0.0;
    for (ch, weight) in HSV_WEIGHTS.iter().enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for &y0 in &starts(h, wh) {
            for &x0 in &starts(w, ww) {
                let mut va = Vec::with_capacity((ww * wh) as usize);
                let mut vb = Vec::with_capacity((ww * wh) as usize);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = (y * w + x) as usize;
                        va.push(ha[i][ch]);
                        vb.push(hb[i][ch]);
                    }
                }
                acc += ssim_window(&va, &vb);
                count += 1;
            }
        }
        total += weight * acc / count as f64;
    }
    Ok(total.clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn probability_endpoints() {
        let d = ConceptDistribution { mean: 1.0, std: 0.5, a_min: 0.2, a_max: 2.3 };
        assert_eq!(semantic_probability(0.2, &d), 0.0);
        assert_eq!(semantic_probability(2.3, &d), 1.0);
        assert_eq!(semantic_probability(-5.0, &d), 0.0);
        assert_eq!(semantic_probability(9.0, &d), 1.0);
    }

    #[test]
    fn pcs_products() {
        assert_eq!(pcs(1.0, 1.0), 1.0);
        assert!((pcs(0.5, 0.8) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn delta_arithmetic() {
        let d = compute_deltas(&[map(&[("nose", 0.9)]), map(&[("nose", 0.2)])]).unwrap();
        assert!((d.delta_pcs["nose"] - 0.7).abs() < 1e-12);
        assert!((d.delta_max_pcs - 0.7).abs() < 1e-12);
        assert_eq!(d.pcs_max, 0.9);
        assert!(compute_deltas(&[map(&[("nose", 0.9)])]).is_err());
        let same = compute_deltas(&[map(&[("a", 0.3), ("b", 0.1)]), map(&[("a", 0.3), ("b", 0.1)])]).unwrap();
        assert!(same.delta_pcs.values().all(|&v| v == 0.0));
    }

    #[test]
    fn sure_dog_sentence() {
        let pred = map(&[("nose", 0.9), ("eyes", 0.6), ("ears", 0.3)]);
        let other = map(&[("nose", 0.1), ("eyes", 0.4), ("ears", 0.28)]);
        let d = compute_deltas(&[pred.clone(), other]).unwrap();
        let e = generate_explanation("dog", "cat", &pred, &d, &Templates::default());
        assert!(e.verdict.starts_with("I am sure it is a dog"), "{}", e.verdict);
        assert!(e.verdict.contains("vivid nose"));
        assert!(e.verdict.contains("obviously"));
        assert!(e.verdict.contains("confusing ears"));
        assert_eq!(e.phrases[0].concept, "nose");
    }

    #[test]
    fn hsv_identity_and_size_check() {
        let a = RgbImage::from_fn(12, 10, |x, y| image::Rgb([(x * 20) as u8, (y * 25) as u8, 90]));
        assert!((hsv_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = RgbImage::new(10, 10);
        assert!(hsv_similarity(&a, &b).is_err());
    }
}
