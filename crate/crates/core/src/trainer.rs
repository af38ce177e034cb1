//! Three-stage alternating training of a [`ProtoModel`].
//!
//! 1. warm-up: add-on layers and basis bank, backbone frozen;
//! 2. joint: same parameter set under the full weighted loss (backbone too
//!    when `freeze_backbone` is off), followed by projection of every basis
//!    vector onto its most similar same-class training patch;
//! 3. FC: projected gradient descent on the classifier head alone.
//!
//! Stages 2 and 3 alternate until the end-of-cycle total loss stops improving.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::losses::{
    aggregation_loss_grad, classification_loss_grad, joint_loss_grad, orthogonality_loss,
    perturb_basis_with, separation_loss_grad, subspace_separation_loss, LossTerms, LossWeights,
    PerturbationConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::proto_model::similarity::normalize_rows;
use crate::proto_model::{
    chw_to_patches, patches_to_chw, softmax_rows, AddOnGrads, BackboneTrace, ProtoModel,
    FEATURE_SIZE,
};
use crate::util::stream_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// N1
    pub warmup_epochs: usize,
    /// N2
    pub joint_epochs: usize,
    /// Full-batch iterations of the head stage.
    pub fc_epochs: usize,
    pub learning_rate: f64,
    /// Initial step of the head stage's projected gradient descent.
    pub fc_step: f64,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub perturbation: PerturbationConfig,
    pub max_cycles: usize,
    /// Relative end-of-cycle total-loss improvement below which alternation stops.
    pub convergence_tol: f64,
    pub freeze_backbone: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 2,
            joint_epochs: 10,
            fc_epochs: 20,
            learning_rate: 1e-4,
            fc_step: 1.0,
            batch_size: 32,
            loss_weights: LossWeights::default(),
            perturbation: PerturbationConfig::default(),
            max_cycles: 5,
            convergence_tol: 1e-3,
            freeze_backbone: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure(self.warmup_epochs >= 1, || "warmup_epochs must be >= 1".into())?;
        ensure(self.joint_epochs >= 1, || "joint_epochs must be >= 1".into())?;
        ensure(self.max_cycles >= 1, || "max_cycles must be >= 1".into())?;
        ensure(self.batch_size >= 1, || "batch_size must be >= 1".into())?;
        ensure(self.learning_rate > 0.0 && self.learning_rate.is_finite(), || {
            format!("learning_rate must be > 0, got {}", self.learning_rate)
        })?;
        ensure(self.fc_step > 0.0, || "fc_step must be > 0".into())?;
        ensure(
            self.perturbation.sigma >= 0.0 && self.perturbation.sigma.is_finite(),
            || "perturbation sigma must be finite and >= 0".into(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Warmup,
    Joint,
    Fc,
}

impl Stage {
    fn tag(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Fc => "fc",
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub cycle: usize,
    pub epoch: usize,
    pub ce: f64,
    pub l_orth: f64,
    pub l_ss: f64,
    pub l_sep: f64,
    pub l_agg: f64,
    pub total: f64,
    pub accuracy: f64,
}

impl EpochRecord {
    fn new(stage: Stage, cycle: usize, epoch: usize, t: LossTerms, w: &LossWeights, acc: f64) -> Self {
        Self {
            stage,
            cycle,
            epoch,
            ce: t.ce,
            l_orth: t.l_orth,
            l_ss: t.l_ss,
            l_sep: t.l_sep,
            l_agg: t.l_agg,
            total: t.total(w),
            accuracy: acc,
        }
    }
}

/// Where a projected basis vector came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub class: usize,
    pub index: usize,
    pub image_id: usize,
    pub source: String,
    pub row: usize,
    pub col: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub stage: String,
    pub cycle: usize,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    pub provenance: Vec<ProvenanceRecord>,
    pub stages: Vec<StageEvent>,
    pub cycles: usize,
    pub converged: bool,
}

impl TrainingLog {
    pub fn stage_records(&self, stage: Stage) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

/// Add-on input patch matrices `[49, backbone channels]`, cached while the backbone is fixed.
struct BackboneCache {
    checksum: u64,
    patches: Vec<Array2<f64>>,
}

pub struct Trainer<'d> {
    data: &'d Dataset,
    cfg: TrainConfig,
    labels: Vec<usize>,
    cache: Option<BackboneCache>,
    cycle: usize,
    log: TrainingLog,
}

impl<'d> Trainer<'d> {
    pub fn new(data: &'d Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Validation("training dataset is empty".into()));
        }
        Ok(Self {
            labels: data.labels(),
            data,
            cfg,
            cache: None,
            cycle: 0,
            log: TrainingLog::default(),
        })
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn into_log(self) -> TrainingLog {
        self.log
    }

    fn check_model(&self, model: &ProtoModel) -> Result<()> {
        if model.class_labels().len() != self.data.num_classes() {
            return Err(Error::Dimension(format!(
                "model has {} classes, dataset {}",
                model.class_labels().len(),
                self.data.num_classes()
            )));
        }
        Ok(())
    }

    fn backbone_patches(&mut self, model: &ProtoModel) -> &[Array2<f64>] {
        let checksum = model.backbone.checksum();
        let stale = self.cache.as_ref().map(|c| c.checksum != checksum).unwrap_or(true);
        if stale {
            let patches = (0..self.data.len())
                .map(|i| chw_to_patches(&model.backbone_features(&self.data.tensor(i))))
                .collect();
            self.cache = Some(BackboneCache { checksum, patches });
        }
        &self.cache.as_ref().expect("filled").patches
    }

    /// Add-on output patches `[49, D]` for every sample.
    pub fn all_patches(&mut self, model: &ProtoModel) -> Vec<Array2<f64>> {
        let inputs = self.backbone_patches(model).to_vec();
        inputs.iter().map(|x| model.addon.forward(x).output).collect()
    }

    pub fn warmup_stage(&mut self, model: &mut ProtoModel) -> Result<()> {
        self.check_model(model)?;
        self.gradient_stage(model, Stage::Warmup, self.cfg.warmup_epochs, false)
    }

    pub fn joint_stage(&mut self, model: &mut ProtoModel) -> Result<()> {
        self.check_model(model)?;
        let update_backbone = !self.cfg.freeze_backbone;
        self.gradient_stage(model, Stage::Joint, self.cfg.joint_epochs, update_backbone)
    }

    fn gradient_stage(
        &mut self,
        model: &mut ProtoModel,
        stage: Stage,
        epochs: usize,
        update_backbone: bool,
    ) -> Result<()> {
        let mut adam = Adam::new(AdamConfig::with_lr(self.cfg.learning_rate));
        let weights = self.cfg.loss_weights;
        let n = self.data.len();
        for epoch in 0..epochs {
            let tag = format!("{}-{}-{}", stage.tag(), self.cycle, epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut stream_rng(self.cfg.seed, &format!("shuffle-{tag}")));
            let mut noise = stream_rng(self.cfg.seed, &format!("perturb-{tag}"));
            let mut sums = LossTerms::default();
            let mut correct = 0usize;
            for batch in order.chunks(self.cfg.batch_size) {
                let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
                let traces: Vec<BackboneTrace> = if update_backbone {
                    batch
                        .iter()
                        .map(|&i| model.backbone.forward_trace(&self.data.tensor(i)))
                        .collect()
                } else {
                    Vec::new()
                };
                let inputs: Vec<Array2<f64>> = if update_backbone {
                    traces
                        .iter()
                        .map(|t| chw_to_patches(t.activations.last().expect("non-empty")))
                        .collect()
                } else {
                    let cached = self.backbone_patches(model);
                    batch.iter().map(|&i| cached[i].clone()).collect()
                };
                let caches: Vec<_> = inputs.iter().map(|x| model.addon.forward(x)).collect();
                let patches: Vec<Array2<f64>> = caches.iter().map(|c| c.output.clone()).collect();
                let perturbed = perturb_basis_with(&model.bank, self.cfg.perturbation.sigma, &mut noise);
                let jg = joint_loss_grad(&patches, &labels, &model.bank, &perturbed, &model.head, &weights)?;
                if !jg.terms.is_finite() {
                    return Err(Error::Divergence {
                        stage: stage.tag().into(),
                        epoch,
                        detail: format!("{:?}", jg.terms),
                    });
                }
                let b = batch.len() as f64;
                sums.ce += jg.terms.ce * b;
                sums.l_orth += jg.terms.l_orth * b;
                sums.l_ss += jg.terms.l_ss * b;
                sums.l_sep += jg.terms.l_sep * b;
                sums.l_agg += jg.terms.l_agg * b;
                correct += count_correct(&jg.probabilities, &labels);

                let mut addon_grads = AddOnGrads::zeros_like(&model.addon);
                let mut backbone_grads: Option<Vec<(Vec<f64>, Vec<f64>)>> = None;
                for (s, cache) in caches.iter().enumerate() {
                    let (g, dx) = model.addon.backward(cache, &jg.d_patches[s]);
                    addon_grads.accumulate(&g);
                    if update_backbone {
                        let dchw = patches_to_chw(&dx, FEATURE_SIZE, FEATURE_SIZE);
                        let bg = model.backbone.backward(&traces[s], &dchw);
                        let acc = backbone_grads.get_or_insert_with(|| {
                            model
                                .backbone
                                .layers
                                .iter()
                                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                                .collect()
                        });
                        for (slot, lg) in acc.iter_mut().zip(&bg.layers) {
                            for (a, g) in slot.0.iter_mut().zip(lg.weight.iter()) {
                                *a += g;
                            }
                            for (a, g) in slot.1.iter_mut().zip(lg.bias.iter()) {
                                *a += g;
                            }
                        }
                    }
                }
                adam.tick();
                let a = &mut model.addon;
                adam.update(0, slice_mut(&mut a.w1), addon_grads.w1.as_slice().expect("std"));
                adam.update(1, a.b1.as_slice_mut().expect("std"), addon_grads.b1.as_slice().expect("std"));
                adam.update(2, slice_mut(&mut a.w2), addon_grads.w2.as_slice().expect("std"));
                adam.update(3, a.b2.as_slice_mut().expect("std"), addon_grads.b2.as_slice().expect("std"));
                let d_bank = jg.d_bank.as_standard_layout().into_owned();
                adam.update(
                    4,
                    model.bank.vectors.as_slice_mut().expect("standard layout bank"),
                    d_bank.as_slice().expect("std"),
                );
                if let Some(grads) = backbone_grads {
                    for (li, (layer, (gw, gb))) in model.backbone.layers.iter_mut().zip(grads).enumerate() {
                        adam.update(5 + 2 * li, layer.weight.as_slice_mut().expect("std"), &gw);
                        adam.update(6 + 2 * li, layer.bias.as_slice_mut().expect("std"), &gb);
                    }
                }
            }
            let nf = n as f64;
            let means = LossTerms {
                ce: sums.ce / nf,
                l_orth: sums.l_orth / nf,
                l_ss: sums.l_ss / nf,
                l_sep: sums.l_sep / nf,
                l_agg: sums.l_agg / nf,
            };
            let rec = EpochRecord::new(stage, self.cycle, epoch, means, &weights, correct as f64 / nf);
            log::info!(
                "{} cycle {} epoch {}: total {:.5} ce {:.5} orth {:.4} acc {:.3}",
                stage.tag(),
                self.cycle,
                epoch,
                rec.total,
                rec.ce,
                rec.l_orth,
                rec.accuracy
            );
            self.log.records.push(rec);
        }
        self.log.stages.push(StageEvent {
            stage: stage.tag().into(),
            cycle: self.cycle,
            detail: format!("{epochs} epochs"),
        });
        Ok(())
    }

    /// Replaces each basis vector by its most cosine-similar patch among the
    /// training images of its own class.
    pub fn project_basis_vectors(&mut self, model: &mut ProtoModel) -> Result<Vec<ProvenanceRecord>> {
        self.check_model(model)?;
        let patches = self.all_patches(model);
        let records = project_onto_patches(model, self.data, &patches)?;
        self.log.provenance = records.clone();
        self.log.stages.push(StageEvent {
            stage: "project".into(),
            cycle: self.cycle,
            detail: format!("{} basis vectors projected", records.len()),
        });
        Ok(records)
    }

    /// Head-only optimization with every other parameter frozen. Each epoch is
    /// one full-batch projected gradient step with backtracking, so the
    /// cross-entropy never increases.
    pub fn fc_convex_stage(&mut self, model: &mut ProtoModel) -> Result<()> {
        self.check_model(model)?;
        let weights = self.cfg.loss_weights;
        let patches = self.all_patches(model);
        let labels = self.labels.clone();
        let base = classification_loss_grad(&patches, &labels, &model.bank, &model.head)?;
        let pooled = base.pooled;
        let mut eval_rng = stream_rng(self.cfg.seed, &format!("fc-eval-{}", self.cycle));
        let perturbed = perturb_basis_with(&model.bank, self.cfg.perturbation.sigma, &mut eval_rng);
        let fixed = LossTerms {
            ce: 0.0,
            l_orth: orthogonality_loss(&model.bank),
            l_ss: subspace_separation_loss(&model.bank)?,
            l_sep: separation_loss_grad(&patches, &labels, &perturbed)?.value,
            l_agg: aggregation_loss_grad(&patches, &labels, &perturbed)?.value,
        };
        let targets = crate::losses::one_hot(&labels, model.bank.num_classes())?;
        let n = labels.len() as f64;
        let objective = |w: &Array2<f64>| -> (f64, Array2<f64>, Array2<f64>) {
            let probs = softmax_rows(&pooled.dot(&w.t()));
            let ce = crate::losses::cross_entropy_loss(&probs, &targets).unwrap_or(f64::INFINITY);
            let grad = ((&probs - &targets) / n).t().dot(&pooled);
            (ce, grad, probs)
        };
        let mut step = self.cfg.fc_step;
        let (mut ce, mut grad, mut probs) = objective(&model.head.weights);
        for epoch in 0..self.cfg.fc_epochs {
            let mut accepted = false;
            for _ in 0..40 {
                let candidate = (&model.head.weights - &(&grad * step)).mapv(crate::proto_model::clamp_weight);
                let moved = (&candidate - &model.head.weights).mapv(|v| v * v).sum();
                let (c_ce, c_grad, c_probs) = objective(&candidate);
                if c_ce <= ce - 1e-4 * moved / step {
                    model.head.weights = candidate;
                    ce = c_ce;
                    grad = c_grad;
                    probs = c_probs;
                    step *= 1.5;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                log::debug!("fc stage: no descent step found at epoch {epoch}");
            }
            let terms = LossTerms { ce, ..fixed };
            let acc = count_correct(&probs, &labels) as f64 / n;
            self.log
                .records
                .push(EpochRecord::new(Stage::Fc, self.cycle, epoch, terms, &weights, acc));
        }
        self.log.stages.push(StageEvent {
            stage: "fc".into(),
            cycle: self.cycle,
            detail: format!("{} iterations, final ce {ce:.6}", self.cfg.fc_epochs),
        });
        Ok(())
    }

    /// Warm-up once, then alternate joint / projection / FC cycles.
    pub fn train(&mut self, model: &mut ProtoModel) -> Result<()> {
        self.train_with(model, |_, _, _| Ok(()))
    }

    /// Like [`Trainer::train`], calling `after_cycle(model, log, cycle)` at the end of every cycle.
    pub fn train_with<F>(&mut self, model: &mut ProtoModel, mut after_cycle: F) -> Result<()>
    where
        F: FnMut(&ProtoModel, &TrainingLog, usize) -> Result<()>,
    {
        self.check_model(model)?;
        self.cycle = 0;
        self.warmup_stage(model)?;
        let mut previous: Option<f64> = None;
        for cycle in 0..self.cfg.max_cycles {
            self.cycle = cycle;
            self.joint_stage(model)?;
            self.project_basis_vectors(model)?;
            self.fc_convex_stage(model)?;
            self.log.cycles = cycle + 1;
            after_cycle(model, &self.log, cycle)?;
            let end_total = self
                .log
                .records
                .last()
                .map(|r| r.total)
                .unwrap_or(f64::INFINITY);
            if let Some(prev) = previous {
                let rel = (prev - end_total) / prev.abs().max(f64::MIN_POSITIVE);
                if rel < self.cfg.convergence_tol {
                    self.log.converged = true;
                    break;
                }
            }
            previous = Some(end_total);
        }
        Ok(())
    }
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn count_correct(probs: &Array2<f64>, labels: &[usize]) -> usize {
    probs
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &l)| argmax(row.iter().copied()) == l)
        .count()
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (i, v) in values.enumerate() {
        if v > best {
            best = v;
            idx = i;
        }
    }
    idx
}

/// Projection on precomputed per-sample patch matrices (sample order = dataset order).
/// Ties resolve to the lowest (image id, row, col).
pub fn project_onto_patches(
    model: &mut ProtoModel,
    data: &Dataset,
    patches: &[Array2<f64>],
) -> Result<Vec<ProvenanceRecord>> {
    let bank = &mut model.bank;
    let m = bank.per_class();
    let hw = FEATURE_SIZE * FEATURE_SIZE;
    let mut records = Vec::with_capacity(bank.total());
    for c in 0..bank.num_classes() {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].label == c).collect();
        members.sort_by_key(|&i| data.samples[i].id);
        if members.is_empty() {
            return Err(Error::Validation(format!(
                "class {} has no training images to project onto",
                bank.class_labels[c]
            )));
        }
        let stacked = ndarray::concatenate(
            Axis(0),
            &members.iter().map(|&i| patches[i].view()).collect::<Vec<_>>(),
        )
        .map_err(|e| Error::Dimension(e.to_string()))?;
        let normed = normalize_rows(&stacked);
        let vectors = normalize_rows(&bank.class_matrix(c).to_owned());
        let cos = normed.dot(&vectors.t());
        for j in 0..m {
            let mut best = f64::NEG_INFINITY;
            let mut best_row = 0;
            for r in 0..cos.nrows() {
                if cos[[r, j]] > best {
                    best = cos[[r, j]];
                    best_row = r;
                }
            }
            let sample = members[best_row / hw];
            let pos = best_row % hw;
            bank.vectors
                .index_axis_mut(Axis(0), c)
                .row_mut(j)
                .assign(&stacked.row(best_row));
            records.push(ProvenanceRecord {
                class: c,
                index: j,
                image_id: data.samples[sample].id,
                source: data.samples[sample].source.clone(),
                row: pos / FEATURE_SIZE,
                col: pos % FEATURE_SIZE,
                similarity: best,
            });
        }
    }
    Ok(records)
}

/// Standalone projection step.
pub fn project_basis_vectors(model: &mut ProtoModel, data: &Dataset) -> Result<Vec<ProvenanceRecord>> {
    let mut t = Trainer::new(data, TrainConfig::default())?;
    t.project_basis_vectors(model)
}

/// Runs the full schedule and returns the log.
pub fn train(model: &mut ProtoModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    let mut t = Trainer::new(data, cfg.clone())?;
    t.train(model)?;
    Ok(t.into_log())
}
