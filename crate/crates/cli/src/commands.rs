//! Command implementations. Primary outputs are byte-reproducible for a given
//! (config, seed); wall-clock timestamps go only to `run.log`.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};

use hrl_core::encoder::{build_model, HrlModel, Variant};
use hrl_core::io;
use hrl_core::synth::Dataset;
use hrl_core::tensor::gradcheck;
use hrl_core::tensor::Tape;
use hrl_core::train::{
    balance_classes, cross_validate, evaluate, prepare_items, train_model, CrossValReport,
    Pipeline, SplitMember,
};

use crate::config::RunConfig;

/// Append-only log file; the only place timestamps are written.
pub struct RunLog {
    path: PathBuf,
}

impl RunLog {
    pub fn new(out_dir: &Path) -> Self {
        RunLog {
            path: out_dir.join("run.log"),
        }
    }

    pub fn note(&self, msg: &str) {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| format!("{}.{:03}", d.as_secs(), d.subsec_millis()))
            .unwrap_or_default();
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(f, "[{stamp}] {msg}");
        }
    }
}

fn ensure_out(out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
}

fn build_from_config(cfg: &RunConfig, dataset: &Dataset, seed: u64) -> anyhow::Result<HrlModel<f32>> {
    let (backbone, model_cfg) = cfg.model.resolve(dataset)?;
    Ok(build_model::<f32>(&backbone, &model_cfg, dataset.extents(), seed)?)
}

fn all_members(dataset: &Dataset) -> Vec<SplitMember> {
    (0..dataset.subjects.len())
        .map(|subject_index| SplitMember {
            subject_index,
            augment_seed: None,
        })
        .collect()
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let Some(generator) = &cfg.data.generator else {
        bail!("generate needs a [data.generator] section");
    };
    ensure_out(out)?;
    let log = RunLog::new(out);
    log.note("generate: start");
    let dataset = hrl_core::synth::generate_dataset(generator, cfg.seed)?;
    let manifest = io::write_dataset(out, &dataset)?;
    cfg.write_resolved(out)?;
    log.note("generate: done");

    let mut per_class: HashMap<usize, usize> = HashMap::new();
    let mut per_site: HashMap<u8, usize> = HashMap::new();
    for s in &dataset.subjects {
        *per_class.entry(s.label).or_default() += 1;
        *per_site.entry(s.site).or_default() += 1;
    }
    let mut classes: Vec<_> = per_class.into_iter().collect();
    classes.sort_unstable();
    let mut sites: Vec<_> = per_site.into_iter().collect();
    sites.sort_unstable();
    println!("wrote {} subjects to {}", dataset.subjects.len(), manifest.display());
    for (class, n) in classes {
        println!("  class {class}: {n}");
    }
    for (site, n) in sites {
        println!("  site {site}: {n}");
    }
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    ensure_out(out)?;
    let log = RunLog::new(out);
    let dataset = cfg.load_dataset()?;
    log.note(&format!("train: {} subjects loaded", dataset.subjects.len()));
    let mut model = build_from_config(cfg, &dataset, cfg.train.seed)?;
    let members = balance_classes(&dataset, &(0..dataset.subjects.len()).collect::<Vec<_>>(), cfg.train.seed)?;
    let items = prepare_items::<f32>(&dataset, &members, &cfg.train.augment, &cfg.pipeline)?;
    let report = train_model(&mut model, &items, &cfg.train)?;
    io::save_model(&out.join("model.ckpt"), &model)?;
    cfg.write_resolved(out)?;

    let mut curve = String::from("stage,epoch,train_acc,loss\n");
    if let Some(s1) = &report.stage1 {
        for (e, (acc, loss)) in s1.epoch_train_acc.iter().zip(&s1.epoch_loss).enumerate() {
            curve.push_str(&format!("1,{},{acc},{loss}\n", e + 1));
        }
    }
    for (e, (acc, loss)) in report
        .stage2
        .epoch_train_acc
        .iter()
        .zip(&report.stage2.epoch_loss)
        .enumerate()
    {
        curve.push_str(&format!("2,{},{acc},{loss}\n", e + 1));
    }
    std::fs::write(out.join("train_curve.csv"), curve)?;
    log.note("train: done");
    println!(
        "trained ({} stage-1 epochs, {} stage-2 epochs); checkpoint at {}",
        report.stage1.as_ref().map_or(0, |s| s.epochs_run),
        report.stage2.epochs_run,
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn export_crossval(report: &CrossValReport, out: &Path, run_id: &str) -> anyhow::Result<()> {
    let mut metric_rows = Vec::new();
    for fold in &report.folds {
        for (metric, value) in fold.report.rows() {
            if value.is_finite() {
                metric_rows.push((fold.repeat, fold.fold, metric, value));
            }
        }
    }
    io::write_metrics_csv(&out.join("metrics.csv"), run_id, &metric_rows)?;

    // One summary block per repeat, then the overall block.
    let mut summary_rows: Vec<(String, String, f64, f64)> = Vec::new();
    let repeats = report.pooled.len();
    let metric_names: Vec<String> = report.summary.iter().map(|(n, _, _)| n.clone()).collect();
    for repeat in 0..repeats {
        for name in &metric_names {
            let values: Vec<f64> = report
                .folds
                .iter()
                .filter(|f| f.repeat == repeat)
                .filter_map(|f| {
                    f.report
                        .rows()
                        .into_iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, v)| v)
                })
                .filter(|v| v.is_finite())
                .collect();
            if !values.is_empty() {
                let (mean, std) = hrl_core::metrics::mean_std(&values);
                summary_rows.push((format!("r{repeat}"), name.clone(), mean, std));
            }
        }
    }
    for (name, mean, std) in &report.summary {
        summary_rows.push(("all".to_string(), name.clone(), *mean, *std));
    }
    io::write_summary_csv(&out.join("summary.csv"), &summary_rows)?;
    for (repeat, pooled) in report.pooled.iter().enumerate() {
        io::write_confusion_csv(&out.join(format!("confusion_r{repeat}.csv")), pooled)?;
    }
    let prediction_rows: Vec<(usize, usize, &hrl_core::train::PredictionRow)> = report
        .folds
        .iter()
        .flat_map(|f| f.predictions.iter().map(move |p| (f.repeat, f.fold, p)))
        .collect();
    io::write_predictions_csv(&out.join("predictions.csv"), &prediction_rows)?;
    Ok(())
}

/// Pooled backbone features for every subject, for external embedding plots.
fn export_penultimate(
    model: &mut HrlModel<f32>,
    dataset: &Dataset,
    pipeline: &Pipeline,
    batch: usize,
    path: &Path,
) -> anyhow::Result<()> {
    if model.cfg.variant == Variant::HandcraftedOnly {
        return Ok(()); // no backbone stream to export
    }
    let members = all_members(dataset);
    let items = prepare_items::<f32>(
        dataset,
        &members,
        &hrl_core::preprocess::AffineRanges::zero(),
        pipeline,
    )?;
    let extents = model.input_extents;
    let mut rows = Vec::with_capacity(items.len());
    for chunk in (0..items.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let mut tape = Tape::new();
        let mut data = Vec::new();
        for &i in chunk {
            data.extend_from_slice(&items[i].volume);
        }
        let volumes = tape.leaf(data, &[chunk.len(), 1, extents[0], extents[1], extents[2]], false)?;
        let pooled = model.pooled_backbone_features(&mut tape, volumes, false, false)?;
        let c = tape.shape(pooled)[1];
        for (j, &i) in chunk.iter().enumerate() {
            let feats: Vec<f64> = tape.data(pooled)[j * c..(j + 1) * c]
                .iter()
                .map(|&v| v as f64)
                .collect();
            rows.push((items[i].id.clone(), feats));
        }
    }
    io::write_pooled_features_csv(path, &rows)?;
    Ok(())
}

pub fn cmd_crossval(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    ensure_out(out)?;
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let log = RunLog::new(out);
    let dataset = cfg.load_dataset()?;
    log.note(&format!(
        "crossval: {} subjects, k={}, repeats={}",
        dataset.subjects.len(),
        cfg.eval.folds,
        cfg.eval.repeats
    ));
    let ckpt_dir = out.join("checkpoints");
    let report = cross_validate::<f32, _, _>(
        &dataset,
        &cfg.train,
        &cfg.eval,
        &cfg.pipeline,
        |seed| {
            let (backbone, model_cfg) = cfg
                .model
                .resolve(&dataset)
                .map_err(|e| hrl_core::Error::Config(e.to_string()))?;
            build_model::<f32>(&backbone, &model_cfg, dataset.extents(), seed)
        },
        |repeat, fold, model| {
            io::save_model(&ckpt_dir.join(format!("r{repeat}_f{fold}.ckpt")), model)
        },
    )?;
    export_crossval(&report, out, "crossval")?;

    // Penultimate features from the first fold's model, over all subjects.
    let first_ckpt = ckpt_dir.join("r0_f0.ckpt");
    let mut model = io::load_model::<f32>(&first_ckpt)?;
    export_penultimate(
        &mut model,
        &dataset,
        &cfg.pipeline,
        cfg.train.batch_size,
        &out.join("penultimate.csv"),
    )?;
    cfg.write_resolved(out)?;
    log.note("crossval: done");

    println!("cross-validation summary (mean±std):");
    for (name, mean, std) in &report.summary {
        println!("  {name}: {}", io::format_mean_std_percent(*mean, *std));
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> anyhow::Result<()> {
    ensure_out(out)?;
    let log = RunLog::new(out);
    let dataset = cfg.load_dataset()?;
    let mut model = io::load_model::<f32>(checkpoint)?;
    log.note(&format!(
        "eval: {} subjects against {}",
        dataset.subjects.len(),
        checkpoint.display()
    ));
    let indices: Vec<usize> = (0..dataset.subjects.len()).collect();
    let (report, rows) = evaluate(
        &mut model,
        &dataset,
        &indices,
        &cfg.pipeline,
        cfg.task(),
        cfg.train.batch_size,
    )?;
    let metric_rows: Vec<(usize, usize, String, f64)> = report
        .rows()
        .into_iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(m, v)| (0, 0, m, v))
        .collect();
    io::write_metrics_csv(&out.join("metrics.csv"), "eval", &metric_rows)?;
    io::write_confusion_csv(&out.join("confusion.csv"), &report)?;
    let prediction_rows: Vec<(usize, usize, &hrl_core::train::PredictionRow)> =
        rows.iter().map(|p| (0, 0, p)).collect();
    io::write_predictions_csv(&out.join("predictions.csv"), &prediction_rows)?;
    cfg.write_resolved(out)?;
    log.note("eval: done");
    for (name, value) in report.rows() {
        if value.is_finite() {
            println!("  {name}: {value:.4}");
        }
    }
    Ok(())
}

pub fn cmd_transfer(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    ensure_out(out)?;
    let log = RunLog::new(out);
    let source = cfg.load_dataset()?;
    let Some(target_path) = &cfg.data.target_manifest else {
        bail!("transfer needs data.target_manifest");
    };
    let target = io::read_dataset(target_path)?;
    let label_map: Option<HashMap<usize, usize>> = cfg
        .data
        .label_map
        .as_ref()
        .map(|pairs| pairs.iter().map(|p| (p[0], p[1])).collect());
    log.note(&format!(
        "transfer: train on {} subjects, test on {}",
        source.subjects.len(),
        target.subjects.len()
    ));
    let (report, rows) = hrl_core::train::transfer_eval(
        &source,
        &target,
        &cfg.train,
        cfg.task(),
        &cfg.pipeline,
        label_map.as_ref(),
        |seed| {
            let (backbone, model_cfg) = cfg
                .model
                .resolve(&source)
                .map_err(|e| hrl_core::Error::Config(e.to_string()))?;
            build_model::<f32>(&backbone, &model_cfg, source.extents(), seed)
        },
    )?;
    let metric_rows: Vec<(usize, usize, String, f64)> = report
        .rows()
        .into_iter()
        .filter(|(_, v)| v.is_finite())
        .map(|(m, v)| (0, 0, m, v))
        .collect();
    io::write_metrics_csv(&out.join("metrics.csv"), "transfer", &metric_rows)?;
    io::write_confusion_csv(&out.join("confusion.csv"), &report)?;
    let prediction_rows: Vec<(usize, usize, &hrl_core::train::PredictionRow)> =
        rows.iter().map(|p| (0, 0, p)).collect();
    io::write_predictions_csv(&out.join("predictions.csv"), &prediction_rows)?;
    cfg.write_resolved(out)?;
    log.note("transfer: done");
    for (name, value) in report.rows() {
        if value.is_finite() {
            println!("  {name}: {value:.4}");
        }
    }
    Ok(())
}

pub fn cmd_extract_features(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    ensure_out(out)?;
    let dataset = cfg.load_dataset()?;
    let rows: Vec<(&str, &hrl_core::preprocess::FeatureVector)> = dataset
        .subjects
        .iter()
        .map(|s| (s.id.as_str(), &s.features))
        .collect();
    io::write_features_csv(&out.join("features.csv"), &rows)?;
    cfg.write_resolved(out)?;
    println!(
        "wrote {} feature rows x {} slots",
        dataset.subjects.len(),
        dataset.feature_len()
    );
    Ok(())
}

pub fn cmd_export_maps(
    cfg: &RunConfig,
    checkpoint: &Path,
    subject: &str,
    stage: usize,
    out: &Path,
) -> anyhow::Result<()> {
    if !(1..=4).contains(&stage) {
        bail!("unknown stage {stage}; expected 1..=4");
    }
    ensure_out(out)?;
    let dataset = cfg.load_dataset()?;
    let mut model = io::load_model::<f32>(checkpoint)?;
    let index = dataset
        .subjects
        .iter()
        .position(|s| s.id == subject)
        .with_context(|| format!("subject {subject} not in dataset"))?;
    let members = vec![SplitMember {
        subject_index: index,
        augment_seed: None,
    }];
    let items = prepare_items::<f32>(
        &dataset,
        &members,
        &hrl_core::preprocess::AffineRanges::zero(),
        &cfg.pipeline,
    )?;
    let extents = model.input_extents;
    let mut tape = Tape::new();
    let volume = tape.leaf(
        items[0].volume.clone(),
        &[1, 1, extents[0], extents[1], extents[2]],
        false,
    )?;
    let (_, trace) = model
        .backbone
        .forward_traced(&mut tape, volume, false, false)?;
    let maps = trace.stages[stage - 1];
    let shape = tape.shape(maps).to_vec();
    let (channels, dims) = (shape[1], [shape[2], shape[3], shape[4]]);
    let per_channel: usize = dims.iter().product();
    let mut written = 0;
    for c in 0..channels {
        let channel: Vec<f32> = tape.data(maps)[c * per_channel..(c + 1) * per_channel].to_vec();
        let base = format!("{subject}_stage{stage}_ch{c:03}");
        written += io::channel_slices_to_pgm(out, &base, &channel, dims)?.len();
    }
    cfg.write_resolved(out)?;
    println!("wrote {written} slice images for {channels} channels");
    Ok(())
}

pub fn cmd_gradcheck(inject_fault: bool) -> anyhow::Result<i32> {
    let mut cases = gradcheck::registry();
    if inject_fault {
        cases.push(gradcheck::corrupt_fixture());
    }
    let results = gradcheck::run_all(&cases);
    let mut failures = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {} max_rel_err={:.3e}", r.name, r.max_rel_err);
        if !r.passed() {
            failures += 1;
        }
    }
    println!(
        "{} of {} gradient checks passed (threshold {:.0e})",
        results.len() - failures,
        results.len(),
        gradcheck::REL_ERR_THRESHOLD
    );
    Ok(if failures == 0 { 0 } else { 1 })
}
