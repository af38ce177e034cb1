//! One function per CLI subcommand: load inputs, run a stage, write artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use image::RgbImage;
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    self, load_checkpoint, read_json, save_checkpoint, ArtifactStore, Checkpoint, CheckpointMeta, VerifyReport,
    CONCEPTS_FILE, PROVENANCE_FILE, TRAINING_LOG_FILE,
};
use crate::common_traits::{collect_concept_features, fit_traits, summarize, TraitSummary};
use crate::config::RunConfig;
use crate::data::{image_to_tensor, ingest_dataset, resize_to_input, synthetic, tensor_to_image, Dataset, DatasetManifest};
use crate::error::{Error, Result};
use crate::explanation::{explain_image, fit_concept_model, ConceptModel, ExplanationReport, Templates};
use crate::feature_viz::{invert_features, overlay_mask, salient_region_mask, AddOnFeatures, InversionConfig};
use crate::percept_study::{run_percept_study, sample_per_class, Domain, SensitivityReport};
use crate::proto_model::{stack_images, ProtoModel, FEATURE_SIZE};
use crate::rank_sensitivity::{assign_concepts, mean_scores, rank_profile, RankProfile, RANK_TOLERANCE};
use crate::render;
use crate::trainer::{self, TrainingLog};
use crate::util::stream_rng;

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if let Some(root) = &cfg.data.root {
        let manifest = ingest_dataset(root, &cfg.data.augmentation)?;
        return Dataset::load(&manifest, &cfg.data.augmentation, cfg.seed);
    }
    let toy = cfg.data.toy.as_ref().ok_or_else(|| Error::Config("config needs data.root or data.toy".into()))?;
    synthetic::toy_dataset(toy.classes, toy.per_class, cfg.seed)
}

/// Manifest of `data.root`, when the run uses files on disk.
pub fn dataset_manifest(cfg: &RunConfig) -> Result<Option<DatasetManifest>> {
    cfg.data
        .root
        .as_ref()
        .map(|root| ingest_dataset(root, &cfg.data.augmentation))
        .transpose()
}

pub fn init_model(cfg: &RunConfig, classes: Vec<String>) -> Result<ProtoModel> {
    ProtoModel::new(&cfg.model, classes, &mut stream_rng(cfg.seed, "model-init"))
}

/// Image file to a model-ready tensor.
pub fn load_image(path: &Path) -> Result<(RgbImage, Array3<f64>)> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = resize_to_input(&img);
    let t = image_to_tensor(&img);
    Ok((img, t))
}

fn concept_model(cfg: &RunConfig, model: &ProtoModel, data: &Dataset, log: &TrainingLog) -> Result<ConceptModel> {
    let names = (!cfg.concepts.names.is_empty()).then_some(&cfg.concepts.names);
    let assignment = assign_concepts(&model.bank, &log.provenance, cfg.concepts.cluster_count, cfg.seed, &[], names)?;
    fit_concept_model(model, data, &assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub cycles: usize,
    pub converged: bool,
    pub final_accuracy: Option<f64>,
    pub final_total: Option<f64>,
}

/// Trains, projects, fits concept distributions and writes a checkpoint.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let mut model = init_model(cfg, data.classes.clone())?;
    let log = trainer::train(&mut model, &data, &cfg.train_config())?;
    // Persisted tensors are f32; analyse the model that will be reloaded.
    model.bank.quantize_f32();
    model.head.quantize_f32();
    let concepts = concept_model(cfg, &model, &data, &log)?;

    let mut store = ArtifactStore::open(out, &cfg.hash())?;
    if let Some(manifest) = dataset_manifest(cfg)? {
        store.write_json("dataset_manifest.json", "dataset_manifest", &manifest)?;
    }
    let meta = CheckpointMeta {
        class_names: data.classes.clone(),
        stages: log.stages.clone(),
        cycles: log.cycles,
        converged: log.converged,
        config: serde_json::to_value(cfg)?,
    };
    save_checkpoint(&mut store, &model, &cfg.model, &meta, &log.provenance)?;
    store.write_json(CONCEPTS_FILE, "concepts", &concepts)?;
    store.write_bytes(TRAINING_LOG_FILE, log.to_jsonl()?.as_bytes())?;
    let last = log.records.last();
    Ok(TrainSummary {
        cycles: log.cycles,
        converged: log.converged,
        final_accuracy: last.map(|r| r.accuracy),
        final_total: last.map(|r| r.total),
    })
}

fn open_checkpoint(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir)?;
    if ckpt.config_hash != cfg.hash() {
        log::warn!(
            "checkpoint was trained under config {}, current config is {}",
            ckpt.config_hash,
            cfg.hash()
        );
    }
    Ok(ckpt)
}

fn require_concepts(ckpt: &Checkpoint) -> Result<&ConceptModel> {
    ckpt.concepts
        .as_ref()
        .ok_or_else(|| Error::Validation(format!("checkpoint has no {CONCEPTS_FILE}; run `train` first")))
}

/// Re-projects the basis vectors of a checkpoint onto the training patches.
pub fn run_project(cfg: &RunConfig, ckpt_dir: &Path) -> Result<usize> {
    let data = load_dataset(cfg)?;
    let mut ckpt = open_checkpoint(cfg, ckpt_dir)?;
    let records = trainer::project_basis_vectors(&mut ckpt.model, &data)?;
    ckpt.model.bank.quantize_f32();
    let mut store = ArtifactStore::open(ckpt_dir, &cfg.hash())?;
    checkpoint::save_model(&mut store, &ckpt.model, &ckpt.model_config)?;
    store.write_json(PROVENANCE_FILE, "provenance", &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rank_tolerance: f64,
    pub mean_scores: BTreeMap<String, f64>,
    pub profiles: Vec<RankProfile>,
}

/// Rank profiles of a per-class sample of training images.
pub fn run_rank(cfg: &RunConfig, ckpt_dir: &Path, out: &Path) -> Result<RankReport> {
    let data = load_dataset(cfg)?;
    let ckpt = open_checkpoint(cfg, ckpt_dir)?;
    let concepts = require_concepts(&ckpt)?;
    let sample = sample_per_class(&data, cfg.concepts.rank_images, cfg.seed);
    let mut profiles = Vec::with_capacity(sample.len());
    for (i, s) in sample.samples.iter().enumerate() {
        let fwd = ckpt.model.forward(&stack_images(&[sample.tensor(i)])?)?;
        let sims = fwd.similarities.index_axis(Axis(0), 0);
        profiles.push(rank_profile(s.id, sims, &concepts.assignment, RANK_TOLERANCE)?);
    }
    let report = RankReport {
        rank_tolerance: RANK_TOLERANCE,
        mean_scores: mean_scores(&profiles)?,
        profiles,
    };
    let mut store = ArtifactStore::open(out, &cfg.hash())?;
    store.write_json("rank_profiles.json", "rank_profiles", &report)?;
    let bars: Vec<f64> = report.mean_scores.values().copied().collect();
    store.write_png("rank_scores.png", &render::bar_chart(&bars, 320, 200))?;
    Ok(report)
}

fn file_stem(concept: &str) -> String {
    concept
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Common-trait PCA for every concept.
pub fn run_traits(cfg: &RunConfig, ckpt_dir: &Path, out: &Path) -> Result<BTreeMap<String, TraitSummary>> {
    let data = load_dataset(cfg)?;
    let ckpt = open_checkpoint(cfg, ckpt_dir)?;
    let concepts = require_concepts(&ckpt)?;
    let mut store = ArtifactStore::open(out, &cfg.hash())?;
    let mut index = BTreeMap::new();
    for concept in &concepts.assignment.concepts {
        if concepts.assignment.filters_of(concept).is_empty() {
            continue;
        }
        let feats = collect_concept_features(
            &data,
            &ckpt.model,
            &concepts.assignment,
            concept,
            cfg.traits.samples,
            cfg.seed,
            cfg.traits.source,
        )?;
        let (space, centered) = fit_traits(&feats.rows, cfg.traits.k)?;
        let summary = summarize(&feats, &space, &centered);
        let stem = format!("traits_{}", file_stem(concept));
        let (d, k) = space.components.dim();
        let values: Vec<f64> = space.components.iter().copied().collect();
        store.write_tensor(&format!("{stem}.bin"), &[d, k], &values)?;
        store.write_json(&format!("{stem}.json"), "traits", &summary)?;
        index.insert(concept.clone(), summary);
    }
    store.write_json("traits_index.json", "traits_index", &index)?;
    Ok(index)
}

/// First principal component reshaped to `[D, H, W]` and min-max scaled into
/// `[0, 1]`, the range of the add-on output.
pub fn trait_target(components: &Array2<f64>, shape: [usize; 3]) -> Result<Array3<f64>> {
    let pc = components.column(0);
    let [d, h, w] = shape;
    if pc.len() != d * h * w {
        return Err(Error::Dimension(format!(
            "component of length {} does not reshape to {shape:?}",
            pc.len()
        )));
    }
    let lo = pc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Ok(Array3::from_shape_fn((d, h, w), |(c, y, x)| (pc[c * h * w + y * w + x] - lo) / span))
}

fn concept_map(sims: &ndarray::ArrayView3<f64>, filters: &[usize]) -> Array2<f64> {
    let (_, h, w) = sims.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        filters.iter().map(|&f| sims[[f, y, x]]).fold(f64::NEG_INFINITY, f64::max)
    })
}

fn write_salient_overlays(
    store: &mut ArtifactStore,
    model: &ProtoModel,
    concepts: &ConceptModel,
    img: &RgbImage,
    tensor: &Array3<f64>,
    percentile: f64,
    prefix: &str,
) -> Result<Vec<String>> {
    let fwd = model.forward(&stack_images(std::slice::from_ref(tensor))?)?;
    let sims = fwd.similarities.index_axis(Axis(0), 0);
    let mut written = Vec::new();
    for concept in &concepts.assignment.concepts {
        let filters = concepts.assignment.filters_of(concept);
        if filters.is_empty() {
            continue;
        }
        let mask = salient_region_mask(concept_map(&sims, &filters).view(), percentile)?;
        let name = format!("{prefix}salient_{}.png", file_stem(concept));
        store.write_png(&name, &overlay_mask(img, &mask))?;
        written.push(name);
    }
    Ok(written)
}

/// Inverts each concept's first common trait through the add-on features and,
/// given an image, writes its salient-region overlays.
pub fn run_visualize(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    out: &Path,
    inversion: &InversionConfig,
    image: Option<&Path>,
) -> Result<Vec<String>> {
    let ckpt = open_checkpoint(cfg, ckpt_dir)?;
    let concepts = require_concepts(&ckpt)?;
    let index_path = out.join("traits_index.json");
    if !index_path.exists() {
        run_traits(cfg, ckpt_dir, out)?;
    }
    let (index, _): (BTreeMap<String, TraitSummary>, String) = read_json(&index_path, "traits_index")?;
    let mut store = ArtifactStore::open(out, &cfg.hash())?;
    let layer = AddOnFeatures { model: &ckpt.model };
    let mut written = Vec::new();
    for (concept, summary) in &index {
        let stem = format!("traits_{}", file_stem(concept));
        let components = crate::common_traits::read_trait_components(&out.join(format!("{stem}.bin")))?;
        let target = trait_target(&components, summary.feature_shape)?;
        if target.dim() != (ckpt.model.addon.out_channels(), FEATURE_SIZE, FEATURE_SIZE) {
            return Err(Error::Dimension(format!(
                "trait {concept} has shape {:?}, the add-on produces [{}, {FEATURE_SIZE}, {FEATURE_SIZE}]",
                summary.feature_shape,
                ckpt.model.addon.out_channels()
            )));
        }
        let inv = invert_features(&target, &layer, inversion)?;
        let png = format!("trait_{}.png", file_stem(concept));
        store.write_png(&png, &tensor_to_image(&inv.image))?;
        store.write_bytes(&format!("trait_{}_inversion.jsonl", file_stem(concept)), inv.to_jsonl()?.as_bytes())?;
        written.push(png);
    }
    if let Some(path) = image {
        let (img, t) = load_image(path)?;
        written.extend(write_salient_overlays(
            &mut store,
            &ckpt.model,
            concepts,
            &img,
            &t,
            cfg.explain.salient_percentile,
            "",
        )?);
    }
    Ok(written)
}

fn templates(cfg: &RunConfig) -> Result<Templates> {
    match &cfg.explain.templates {
        Some(p) => Templates::load(p),
        None => Ok(Templates::default()),
    }
}

/// Explanation JSON, similarity histogram, bubble ring and salient overlays for one image.
pub fn run_explain(cfg: &RunConfig, ckpt_dir: &Path, image: &Path, out: &Path) -> Result<ExplanationReport> {
    let ckpt = open_checkpoint(cfg, ckpt_dir)?;
    let concepts = require_concepts(&ckpt)?;
    let (img, t) = load_image(image)?;
    let name = image
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let report = explain_image(&ckpt.model, concepts, &t, &name, &templates(cfg)?)?;
    let mut store = ArtifactStore::open(out, &cfg.hash())?;
    store.write_json("explanation.json", "explanation", &report)?;
    let hist: Vec<f64> = report.global_similarity.iter().map(|s| s.score).collect();
    store.write_png("similarity_histogram.png", &render::bar_chart(&hist, 320, 200))?;
    store.write_png("bubble_ring.png", &render::bubble_ring(&report.bubble_ring, 320))?;
    write_salient_overlays(
        &mut store,
        &ckpt.model,
        concepts,
        &img,
        &t,
        cfg.explain.salient_percentile,
        "explain_",
    )?;
    Ok(report)
}

/// Perceptual-domain sensitivity report with box-plot data.
pub fn run_percept(
    cfg: &RunConfig,
    ckpt_dir: &Path,
    out: &Path,
    domains: Option<&[Domain]>,
    samples_per_category: Option<usize>,
) -> Result<SensitivityReport> {
    let data = load_dataset(cfg)?;
    let ckpt = open_checkpoint(cfg, ckpt_dir)?;
    let concepts = require_concepts(&ckpt)?;
    let report = run_percept_study(
        &ckpt.model,
        &data,
        &concepts.assignment,
        domains.unwrap_or(&cfg.percept.domains),
        &cfg.percept.spec,
        samples_per_category.unwrap_or(cfg.percept.samples_per_category),
        cfg.seed,
    )?;
    let mut store = ArtifactStore::open(out, &cfg.hash())?;
    store.write_json("percept_report.json", "percept_report", &report)?;
    store.write_png("percept_boxplot.png", &render::box_plot(&report, 480, 240))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub artifacts: Vec<String>,
    pub verification: VerifyReport,
    pub classes: Option<Vec<String>>,
    pub training_cycles: Option<usize>,
    pub concept_scores: Option<BTreeMap<String, f64>>,
    pub verdict: Option<String>,
}

/// Collects what the other commands left in `dir` into `summary.json`.
pub fn run_report(cfg: &RunConfig, dir: &Path) -> Result<RunSummary> {
    let verification = checkpoint::verify_dir(dir)?;
    let manifest_text =
        std::fs::read_to_string(dir.join(checkpoint::MANIFEST)).map_err(|e| Error::io(dir.join(checkpoint::MANIFEST), e))?;
    let manifest: checkpoint::Manifest = serde_json::from_str(&manifest_text)?;
    let meta = read_json::<CheckpointMeta>(&dir.join(checkpoint::META_FILE), "meta").ok();
    let rank = read_json::<RankReport>(&dir.join("rank_profiles.json"), "rank_profiles").ok();
    let explanation = read_json::<ExplanationReport>(&dir.join("explanation.json"), "explanation").ok();
    let summary = RunSummary {
        artifacts: manifest.files.keys().filter(|k| k.as_str() != "summary.json").cloned().collect(),
        verification,
        classes: meta.as_ref().map(|(m, _)| m.class_names.clone()),
        training_cycles: meta.as_ref().map(|(m, _)| m.cycles),
        concept_scores: rank.map(|(r, _)| r.mean_scores),
        verdict: explanation.map(|(e, _)| e.explanation.verdict),
    };
    let mut store = ArtifactStore::open(dir, &cfg.hash())?;
    store.write_json("summary.json", "summary", &summary)?;
    Ok(summary)
}
