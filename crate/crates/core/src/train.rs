//! Training protocols, stratified cross-validation, and transfer evaluation.
//!
//! Training strategies are interchangeable procedures behind the
//! [`TrainStrategy`] trait, registered by name and selected at runtime:
//!
//! - `two-stage`: train the backbone on volumes alone (with a throwaway
//!   pooled-feature classifier), then train the fusion encoder and head with
//!   the backbone frozen.
//! - `joint`: same backbone pretraining, but the second stage fine-tunes the
//!   backbone together with the encoder.
//! - `scratch`: no backbone pretraining; everything trains jointly from the
//!   seed initialization.

use std::collections::{HashMap, HashSet};

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{HrlModel, Variant};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, mean_std, multi_metrics, MetricsReport, Task};
use crate::params::{Init, ParamStore};
use crate::preprocess::{apply_roi_mask, normalize_rescale, random_affine, AffineRanges};
use crate::synth::{subject_seed, Dataset};
use crate::tensor::adam::{adam_step, OptimizerState};
use crate::tensor::{Scalar, Tape, TensorId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once the running train accuracy of an epoch exceeds this.
    pub early_stop_train_acc: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: String,
    pub augment: AffineRanges,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-4,
            max_epochs: 300,
            early_stop_train_acc: 0.9,
            batch_size: 4,
            seed: 0,
            strategy: "two-stage".to_string(),
            augment: AffineRanges::default(),
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.early_stop_train_acc) {
            return Err(Error::Config("early_stop_train_acc must be in [0, 1]".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Volume-level preprocessing applied before the model sees a subject.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pipeline {
    /// Optional ROI mask (kept ids); applied before normalization.
    pub mask_rois: Option<Vec<u16>>,
}

/// One training example after preprocessing. Augmented copies keep the id of
/// their source subject.
pub struct TrainItem<T> {
    pub id: String,
    pub volume: Vec<T>,
    pub features: Vec<f64>,
    pub label: usize,
    pub augmented: bool,
}

/// A member of a training split: a subject index plus an optional
/// augmentation seed for upsampled copies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMember {
    pub subject_index: usize,
    pub augment_seed: Option<u64>,
}

/// Upsample minority classes to the majority count. Originals stay untouched;
/// copies cycle through the class's subjects with distinct seeds.
pub fn balance_classes(dataset: &Dataset, train_idx: &[usize], seed: u64) -> Result<Vec<SplitMember>> {
    if train_idx.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let classes = dataset.class_count();
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for &i in train_idx {
        per_class[dataset.subjects[i].label].push(i);
    }
    let majority = per_class.iter().map(Vec::len).max().unwrap_or(0);
    let mut members: Vec<SplitMember> = train_idx
        .iter()
        .map(|&i| SplitMember {
            subject_index: i,
            augment_seed: None,
        })
        .collect();
    for (class, sources) in per_class.iter().enumerate() {
        if sources.is_empty() {
            continue;
        }
        for copy in 0..majority - sources.len() {
            members.push(SplitMember {
                subject_index: sources[copy % sources.len()],
                augment_seed: Some(subject_seed(seed ^ 0xba1a, class, copy)),
            });
        }
    }
    Ok(members)
}

/// Materialize split members: augment copies, apply the pipeline, normalize,
/// and convert to the training element type.
pub fn prepare_items<T: Scalar>(
    dataset: &Dataset,
    members: &[SplitMember],
    ranges: &AffineRanges,
    pipeline: &Pipeline,
) -> Result<Vec<TrainItem<T>>> {
    members
        .iter()
        .map(|m| {
            let subject = &dataset.subjects[m.subject_index];
            let raw = match m.augment_seed {
                Some(s) => random_affine(&subject.volume, ranges, s)?,
                None => subject.volume.clone(),
            };
            let masked = match &pipeline.mask_rois {
                Some(keep) => apply_roi_mask(&raw, &dataset.atlas, keep)?,
                None => raw,
            };
            let normalized = normalize_rescale(&masked);
            Ok(TrainItem {
                id: subject.id.clone(),
                volume: normalized.voxels.iter().map(|&v| T::from_f64(v as f64)).collect(),
                features: subject.features.values.clone(),
                label: subject.label,
                augmented: m.augment_seed.is_some(),
            })
        })
        .collect()
}

/// Stratified fold plan: per-class fold sizes differ by at most one.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Seeded stratified partition into k folds.
pub fn make_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config("need k >= 2 folds".into()));
    }
    let classes = dataset.class_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in 0..classes {
        let mut members: Vec<usize> = dataset
            .subjects
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < k {
            log::warn!(
                "class {class} has {} members for {k} folds; distributing as evenly as possible",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for (j, idx) in members.into_iter().enumerate() {
            folds[j % k].push(idx);
        }
    }
    for fold in &mut folds {
        fold.sort_unstable();
    }
    Ok(FoldPlan { k, folds })
}

/// Per-stage training record.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    pub epochs_run: usize,
    pub epoch_train_acc: Vec<f64>,
    pub epoch_loss: Vec<f64>,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub stage1: Option<StageReport>,
    pub stage2: StageReport,
}

fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn stack_volumes<T: Scalar>(
    tape: &mut Tape<T>,
    items: &[TrainItem<T>],
    batch: &[usize],
    extents: [usize; 3],
) -> Result<TensorId> {
    let mut data = Vec::with_capacity(batch.len() * items[batch[0]].volume.len());
    for &i in batch {
        data.extend_from_slice(&items[i].volume);
    }
    tape.leaf(
        data,
        &[batch.len(), 1, extents[0], extents[1], extents[2]],
        false,
    )
}

fn argmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Stage 1: train the backbone on volumes with a temporary global-average-pool
/// + linear classifier (discarded afterwards).
pub fn train_stage1<T: Scalar>(
    model: &mut HrlModel<T>,
    items: &[TrainItem<T>],
    hyper: &TrainHyper,
) -> Result<StageReport> {
    hyper.validate()?;
    if items.is_empty() {
        return Err(Error::Data("stage 1: empty training split".into()));
    }
    let classes = model.cfg.classes;
    let c_n = model.n_channels();
    let mut head = ParamStore::<T>::new();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x51a9e1);
        head.insert(
            "stage1_head.weight",
            Init::kaiming(&mut rng, classes * c_n, c_n),
            vec![classes, c_n],
            true,
        );
        head.insert("stage1_head.bias", Init::zeros(classes), vec![classes], true);
    }
    let mut opt_backbone = OptimizerState::new(hyper.lr);
    let mut opt_head = OptimizerState::new(hyper.lr);
    let extents = model.input_extents;
    let mut report = StageReport::default();

    for epoch in 0..hyper.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(hyper.seed, 1, epoch));
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in epoch_batches(items.len(), hyper.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let volumes = stack_volumes(&mut tape, items, &batch, extents)?;
            let maps = model.backbone.forward(&mut tape, volumes, true, true)?;
            let pooled = crate::encoder::pooled_features(&mut tape, maps)?;
            let w = head.bind(&mut tape, "stage1_head.weight", true);
            let b = head.bind(&mut tape, "stage1_head.bias", true);
            let logits = tape.linear(pooled, w, Some(b))?;
            let labels: Vec<usize> = batch.iter().map(|&i| items[i].label).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.data(loss)[0].to_f64();
            batches += 1;
            for (pred, &actual) in argmax_rows(tape.data(logits), classes).iter().zip(&labels) {
                if *pred == actual {
                    correct += 1;
                }
            }
            tape.backward(loss)?;
            let grads = tape.bound_grads();
            adam_step(&mut model.backbone.params, &grads, &mut opt_backbone)?;
            adam_step(&mut head, &grads, &mut opt_head)?;
        }
        let acc = correct as f64 / items.len() as f64;
        report.epoch_train_acc.push(acc);
        report.epoch_loss.push(loss_sum / batches as f64);
        report.epochs_run = epoch + 1;
        if acc > hyper.early_stop_train_acc {
            report.early_stopped = true;
            break;
        }
    }
    Ok(report)
}

/// Stage 2: train the fusion encoder and head. With `freeze_backbone` the
/// backbone runs in eval mode with no gradient tracking and its feature maps
/// are cached per item; otherwise the backbone fine-tunes jointly.
pub fn train_stage2<T: Scalar>(
    model: &mut HrlModel<T>,
    items: &[TrainItem<T>],
    hyper: &TrainHyper,
    freeze_backbone: bool,
) -> Result<StageReport> {
    hyper.validate()?;
    if items.is_empty() {
        return Err(Error::Data("stage 2: empty training split".into()));
    }
    fit_feature_normalizer(model, items)?;
    let extents = model.input_extents;
    let classes = model.cfg.classes;
    let needs_maps = model.cfg.variant != Variant::HandcraftedOnly;
    let needs_features = model.cfg.variant != Variant::DataDrivenOnly && model.cfg.handcrafted_len > 0;

    // Frozen backbone: compute each item's feature maps once.
    let mut cached_maps: Vec<Vec<T>> = Vec::new();
    let mut map_shape: Vec<usize> = Vec::new();
    if needs_maps && freeze_backbone {
        for chunk in (0..items.len()).collect::<Vec<_>>().chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let volumes = stack_volumes(&mut tape, items, chunk, extents)?;
            let maps = model.backbone.forward(&mut tape, volumes, false, false)?;
            let shape = tape.shape(maps).to_vec();
            let per_item: usize = shape[1..].iter().product();
            map_shape = shape[1..].to_vec();
            for (j, _) in chunk.iter().enumerate() {
                cached_maps.push(tape.data(maps)[j * per_item..(j + 1) * per_item].to_vec());
            }
        }
    }

    let mut opt_fusion = OptimizerState::new(hyper.lr);
    let mut opt_backbone = OptimizerState::new(hyper.lr);
    let mut report = StageReport::default();
    for epoch in 0..hyper.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(hyper.seed, 2, epoch));
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for batch in epoch_batches(items.len(), hyper.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let features: Vec<Vec<f64>> = batch.iter().map(|&i| items[i].features.clone()).collect();
            let features = needs_features.then_some(features);
            let out = if freeze_backbone {
                let maps = if needs_maps {
                    let mut data = Vec::new();
                    for &i in &batch {
                        data.extend_from_slice(&cached_maps[i]);
                    }
                    let mut shape = vec![batch.len()];
                    shape.extend_from_slice(&map_shape);
                    Some(tape.leaf(data, &shape, false)?)
                } else {
                    None
                };
                model.forward_fused(&mut tape, maps, features.as_deref(), true)?
            } else {
                let volumes = if needs_maps {
                    Some(stack_volumes(&mut tape, items, &batch, extents)?)
                } else {
                    None
                };
                model.forward(&mut tape, volumes, features.as_deref(), true, true, true)?
            };
            let labels: Vec<usize> = batch.iter().map(|&i| items[i].label).collect();
            let loss = tape.cross_entropy(out.logits, &labels)?;
            loss_sum += tape.data(loss)[0].to_f64();
            batches += 1;
            for (pred, &actual) in argmax_rows(tape.data(out.logits), classes).iter().zip(&labels) {
                if *pred == actual {
                    correct += 1;
                }
            }
            tape.backward(loss)?;
            let grads = tape.bound_grads();
            adam_step(&mut model.fusion, &grads, &mut opt_fusion)?;
            if !freeze_backbone {
                adam_step(&mut model.backbone.params, &grads, &mut opt_backbone)?;
            }
        }
        let acc = correct as f64 / items.len() as f64;
        report.epoch_train_acc.push(acc);
        report.epoch_loss.push(loss_sum / batches as f64);
        report.epochs_run = epoch + 1;
        if acc > hyper.early_stop_train_acc {
            report.early_stopped = true;
            break;
        }
    }
    Ok(report)
}

/// Fit the per-slot feature standardizer on the training split and store it
/// in the model buffers.
fn fit_feature_normalizer<T: Scalar>(model: &mut HrlModel<T>, items: &[TrainItem<T>]) -> Result<()> {
    let f_len = model.cfg.handcrafted_len;
    if f_len == 0 {
        return Ok(());
    }
    if items.iter().any(|it| it.features.len() != f_len) {
        return Err(Error::Data(format!(
            "training features do not match configured handcrafted length {f_len}"
        )));
    }
    let n = items.len() as f64;
    let mut mean = vec![0.0f64; f_len];
    for it in items {
        for (m, v) in mean.iter_mut().zip(&it.features) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0f64; f_len];
    for it in items {
        for (s, (v, m)) in std.iter_mut().zip(it.features.iter().zip(&mean)) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    model.fusion.get_mut("feat_norm.mean").data = mean.iter().map(|&v| T::from_f64(v)).collect();
    model.fusion.get_mut("feat_norm.std").data = std.iter().map(|&v| T::from_f64(v)).collect();
    Ok(())
}

/// A named, interchangeable training procedure.
pub trait TrainStrategy<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self, model: &mut HrlModel<T>, items: &[TrainItem<T>], hyper: &TrainHyper) -> Result<TrainReport>;
}

/// Backbone pretraining, then fusion training with the backbone frozen.
pub struct TwoStage;

impl<T: Scalar> TrainStrategy<T> for TwoStage {
    fn name(&self) -> &'static str {
        "two-stage"
    }

    fn run(&self, model: &mut HrlModel<T>, items: &[TrainItem<T>], hyper: &TrainHyper) -> Result<TrainReport> {
        let stage1 = if model.cfg.variant == Variant::HandcraftedOnly {
            // No image stream: nothing for the backbone to learn.
            None
        } else {
            Some(train_stage1(model, items, hyper)?)
        };
        let stage2 = train_stage2(model, items, hyper, true)?;
        Ok(TrainReport { stage1, stage2 })
    }
}

/// Everything trains jointly from the seed initialization.
pub struct Scratch;

impl<T: Scalar> TrainStrategy<T> for Scratch {
    fn name(&self) -> &'static str {
        "scratch"
    }

    fn run(&self, model: &mut HrlModel<T>, items: &[TrainItem<T>], hyper: &TrainHyper) -> Result<TrainReport> {
        let stage2 = train_stage2(model, items, hyper, false)?;
        Ok(TrainReport {
            stage1: None,
            stage2,
        })
    }
}

/// Backbone pretraining, then joint fine-tuning of backbone and encoder.
pub struct Joint;

impl<T: Scalar> TrainStrategy<T> for Joint {
    fn name(&self) -> &'static str {
        "joint"
    }

    fn run(&self, model: &mut HrlModel<T>, items: &[TrainItem<T>], hyper: &TrainHyper) -> Result<TrainReport> {
        let stage1 = if model.cfg.variant == Variant::HandcraftedOnly {
            None
        } else {
            Some(train_stage1(model, items, hyper)?)
        };
        let stage2 = train_stage2(model, items, hyper, false)?;
        Ok(TrainReport { stage1, stage2 })
    }
}

/// Runtime registry of training strategies, keyed by name.
pub struct StrategyRegistry<T: Scalar> {
    entries: Vec<Box<dyn TrainStrategy<T>>>,
}

impl<T: Scalar> Default for StrategyRegistry<T> {
    fn default() -> Self {
        Self::standard()
    }
}

impl<T: Scalar> StrategyRegistry<T> {
    pub fn standard() -> Self {
        StrategyRegistry {
            entries: vec![Box::new(TwoStage), Box::new(Scratch), Box::new(Joint)],
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|s| s.name()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn TrainStrategy<T>> {
        let wanted = name.to_ascii_lowercase().replace('_', "-");
        self.entries
            .iter()
            .find(|s| s.name() == wanted)
            .map(|s| s.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown training strategy '{name}' (known: {})",
                    self.names().join(", ")
                ))
            })
    }
}

/// Train a model on prepared items using the strategy named in the hyper.
pub fn train_model<T: Scalar>(
    model: &mut HrlModel<T>,
    items: &[TrainItem<T>],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    StrategyRegistry::<T>::standard()
        .get(&hyper.strategy)?
        .run(model, items, hyper)
}

/// One evaluated subject.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub id: String,
    pub true_label: usize,
    pub predicted: usize,
    pub scores: Vec<f64>,
}

/// Run the model over a split and score it.
pub fn evaluate<T: Scalar>(
    model: &mut HrlModel<T>,
    dataset: &Dataset,
    indices: &[usize],
    pipeline: &Pipeline,
    task: Task,
    batch_size: usize,
) -> Result<(MetricsReport, Vec<PredictionRow>)> {
    let members: Vec<SplitMember> = indices
        .iter()
        .map(|&i| SplitMember {
            subject_index: i,
            augment_seed: None,
        })
        .collect();
    let items: Vec<TrainItem<T>> = prepare_items(dataset, &members, &AffineRanges::zero(), pipeline)?;
    let rows = predict_items(model, &items, batch_size)?;
    let report = score_predictions(&rows, task, model.cfg.classes)?;
    Ok((report, rows))
}

pub fn predict_items<T: Scalar>(
    model: &mut HrlModel<T>,
    items: &[TrainItem<T>],
    batch_size: usize,
) -> Result<Vec<PredictionRow>> {
    let extents = model.input_extents;
    let classes = model.cfg.classes;
    let needs_maps = model.cfg.variant != Variant::HandcraftedOnly;
    let needs_features = model.cfg.variant != Variant::DataDrivenOnly && model.cfg.handcrafted_len > 0;
    let mut rows = Vec::with_capacity(items.len());
    for batch in (0..items.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let volumes = if needs_maps {
            Some(stack_volumes(&mut tape, items, batch, extents)?)
        } else {
            None
        };
        let features: Vec<Vec<f64>> = batch.iter().map(|&i| items[i].features.clone()).collect();
        let features = needs_features.then_some(features);
        let out = model.forward(&mut tape, volumes, features.as_deref(), false, false, false)?;
        let probs = tape.data(out.probs);
        for (j, &i) in batch.iter().enumerate() {
            let scores: Vec<f64> = probs[j * classes..(j + 1) * classes]
                .iter()
                .map(|&p| p.to_f64())
                .collect();
            let predicted = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .map(|(c, _)| c)
                .unwrap_or(0);
            rows.push(PredictionRow {
                id: items[i].id.clone(),
                true_label: items[i].label,
                predicted,
                scores,
            });
        }
    }
    Ok(rows)
}

pub fn score_predictions(rows: &[PredictionRow], task: Task, classes: usize) -> Result<MetricsReport> {
    match task {
        Task::Binary => {
            let scores: Vec<f64> = rows.iter().map(|r| r.scores[1]).collect();
            let labels: Vec<u8> = rows.iter().map(|r| r.true_label as u8).collect();
            compute_metrics(&scores, &labels)
        }
        Task::Multi => {
            let preds: Vec<usize> = rows.iter().map(|r| r.predicted).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.true_label).collect();
            let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.scores.clone()).collect();
            multi_metrics(&preds, &scores, &labels, classes)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub folds: usize,
    pub repeats: usize,
    pub task: Task,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            repeats: 5,
            task: Task::Binary,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub repeat: usize,
    pub fold: usize,
    pub report: MetricsReport,
    pub predictions: Vec<PredictionRow>,
    pub train_report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct CrossValReport {
    pub task: Task,
    pub folds: Vec<FoldOutcome>,
    /// Per repeat: metrics over the pooled predictions of all k folds.
    pub pooled: Vec<MetricsReport>,
    /// metric name -> (mean, std) across folds x repeats.
    pub summary: Vec<(String, f64, f64)>,
}

/// Builds models per fold via `build`, trains with the strategy in `hyper`,
/// and evaluates on the held-out fold. Training splits are class-balanced
/// with augmentation; test folds are never balanced or augmented. Each
/// trained fold model is handed to `sink` (checkpointing, feature export).
pub fn cross_validate<T: Scalar, F, S>(
    dataset: &Dataset,
    hyper: &TrainHyper,
    eval: &EvalConfig,
    pipeline: &Pipeline,
    mut build: F,
    mut sink: S,
) -> Result<CrossValReport>
where
    F: FnMut(u64) -> Result<HrlModel<T>>,
    S: FnMut(usize, usize, &mut HrlModel<T>) -> Result<()>,
{
    let classes = dataset.class_count();
    let mut folds = Vec::new();
    let mut pooled = Vec::new();
    for repeat in 0..eval.repeats {
        let plan = make_folds(dataset, eval.folds, subject_seed(hyper.seed, 3, repeat))?;
        let mut repeat_rows: Vec<PredictionRow> = Vec::new();
        for fold in 0..plan.k {
            let fold_seed = hyper.seed + fold as u64 + 7919 * repeat as u64;
            let mut model = build(fold_seed)?;
            let mut fold_hyper = hyper.clone();
            fold_hyper.seed = fold_seed;
            let train_idx = plan.train_indices(fold);
            let members = balance_classes(dataset, &train_idx, fold_seed)?;
            let items = prepare_items::<T>(dataset, &members, &hyper.augment, pipeline)?;
            let train_report = train_model(&mut model, &items, &fold_hyper)?;
            let (report, predictions) = evaluate(
                &mut model,
                dataset,
                plan.test_indices(fold),
                pipeline,
                eval.task,
                hyper.batch_size,
            )?;
            sink(repeat, fold, &mut model)?;
            repeat_rows.extend(predictions.iter().cloned());
            folds.push(FoldOutcome {
                repeat,
                fold,
                report,
                predictions,
                train_report,
            });
        }
        pooled.push(score_predictions(&repeat_rows, eval.task, classes)?);
    }

    let mut summary = Vec::new();
    let metric_names: Vec<String> = folds[0].report.rows().iter().map(|(n, _)| n.clone()).collect();
    for name in metric_names {
        let values: Vec<f64> = folds
            .iter()
            .filter_map(|f| {
                f.report
                    .rows()
                    .into_iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, v)| v)
            })
            .filter(|v| v.is_finite())
            .collect();
        if values.is_empty() {
            continue;
        }
        let (mean, std) = mean_std(&values);
        summary.push((name, mean, std));
    }
    Ok(CrossValReport {
        task: eval.task,
        folds,
        pooled,
        summary,
    })
}

/// Train on the source dataset only and evaluate on the target dataset only.
/// `label_map` translates target labels into the source label space when the
/// class sets differ.
pub fn transfer_eval<T: Scalar, F>(
    source: &Dataset,
    target: &Dataset,
    hyper: &TrainHyper,
    task: Task,
    pipeline: &Pipeline,
    label_map: Option<&HashMap<usize, usize>>,
    mut build: F,
) -> Result<(MetricsReport, Vec<PredictionRow>)>
where
    F: FnMut(u64) -> Result<HrlModel<T>>,
{
    let source_classes = source.class_count();
    for s in &target.subjects {
        let mapped = match label_map {
            Some(map) => *map.get(&s.label).ok_or_else(|| {
                Error::Config(format!("target label {} has no mapping", s.label))
            })?,
            None => s.label,
        };
        if mapped >= source_classes {
            return Err(Error::Config(format!(
                "target label {} maps outside the source's {} classes",
                s.label, source_classes
            )));
        }
    }
    let mut model = build(hyper.seed)?;
    let all: Vec<usize> = (0..source.subjects.len()).collect();
    let members = balance_classes(source, &all, hyper.seed)?;
    let items = prepare_items::<T>(source, &members, &hyper.augment, pipeline)?;
    train_model(&mut model, &items, hyper)?;

    let target_idx: Vec<usize> = (0..target.subjects.len()).collect();
    let target_members: Vec<SplitMember> = target_idx
        .iter()
        .map(|&i| SplitMember {
            subject_index: i,
            augment_seed: None,
        })
        .collect();
    let mut items = prepare_items::<T>(target, &target_members, &AffineRanges::zero(), pipeline)?;
    if let Some(map) = label_map {
        for it in &mut items {
            it.label = map[&it.label];
        }
    }
    let rows = predict_items(&mut model, &items, hyper.batch_size)?;
    let report = score_predictions(&rows, task, model.cfg.classes)?;
    Ok((report, rows))
}

/// Audit helper: ids on both sides of a train/test boundary.
pub fn id_overlap(dataset: &Dataset, train_members: &[SplitMember], test_idx: &[usize]) -> Vec<String> {
    let train_ids: HashSet<&str> = train_members
        .iter()
        .map(|m| dataset.subjects[m.subject_index].id.as_str())
        .collect();
    test_idx
        .iter()
        .map(|&i| dataset.subjects[i].id.as_str())
        .filter(|id| train_ids.contains(id))
        .map(str::to_string)
        .collect()
}
