//! File formats: versioned binary containers for volumes, atlases, and
//! checkpoints, plus the CSV exports. All binary payloads are little-endian;
//! round trips are bit-exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::encoder::{build_model, HrlModel, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::params::ParamStore;
use crate::preprocess::{Atlas, FeatureVector, Volume};
use crate::synth::{Dataset, Subject};
use crate::tensor::Scalar;
use crate::train::PredictionRow;

const VOLUME_MAGIC: &[u8; 8] = b"HRLVOL01";
const ATLAS_MAGIC: &[u8; 8] = b"HRLATL01";
const CHECKPOINT_MAGIC: &[u8; 8] = b"HRLCKPT1";

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn open_file(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated file"))?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(r: &mut impl Read, path: &Path) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| format_err(path, "truncated file"))?;
    Ok(f32::from_le_bytes(buf))
}

fn check_magic(r: &mut impl Read, expect: &[u8; 8], path: &Path) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(path, "truncated header"))?;
    if &magic != expect {
        return Err(format_err(
            path,
            format!("bad magic {:?}, expected {:?}", magic, expect),
        ));
    }
    Ok(())
}

fn write_header(w: &mut impl Write, magic: &[u8; 8], extents: [usize; 3], spacing: [f32; 3]) -> Result<()> {
    w.write_all(magic)?;
    for e in extents {
        write_u32(w, e as u32)?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 8], path: &Path) -> Result<([usize; 3], [f32; 3])> {
    check_magic(r, magic, path)?;
    let mut extents = [0usize; 3];
    for e in &mut extents {
        *e = read_u32(r, path)? as usize;
    }
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = read_f32(r, path)?;
    }
    Ok((extents, spacing))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    write_header(&mut w, VOLUME_MAGIC, v.extents, v.spacing)?;
    for &x in &v.voxels {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut r = BufReader::new(open_file(path)?);
    let (extents, spacing) = read_header(&mut r, VOLUME_MAGIC, path)?;
    let n: usize = extents.iter().product();
    let mut voxels = Vec::with_capacity(n);
    for _ in 0..n {
        voxels.push(read_f32(&mut r, path)?);
    }
    Ok(Volume {
        extents,
        spacing,
        voxels,
    })
}

pub fn write_atlas(path: &Path, a: &Atlas) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    write_header(&mut w, ATLAS_MAGIC, a.extents, a.spacing)?;
    for plane in [&a.roi_labels, &a.tissue_labels] {
        for &l in plane {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_atlas(path: &Path) -> Result<Atlas> {
    let mut r = BufReader::new(open_file(path)?);
    let (extents, spacing) = read_header(&mut r, ATLAS_MAGIC, path)?;
    let n: usize = extents.iter().product();
    let mut planes = [Vec::with_capacity(n), Vec::with_capacity(n)];
    for plane in &mut planes {
        for _ in 0..n {
            let mut buf = [0u8; 2];
            r.read_exact(&mut buf)
                .map_err(|_| format_err(path, "truncated labels"))?;
            plane.push(u16::from_le_bytes(buf));
        }
    }
    let [roi_labels, tissue_labels] = planes;
    Ok(Atlas {
        extents,
        spacing,
        roi_labels,
        tissue_labels,
    })
}

/// Checkpoint metadata: enough to rebuild the parameter skeleton.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub backbone: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_extents: Option<[usize; 3]>,
}

fn write_records<T: Scalar>(w: &mut impl Write, sections: &[(&str, &ParamStore<T>)]) -> Result<()> {
    let count: usize = sections.iter().map(|(_, s)| s.len()).sum();
    write_u32(w, count as u32)?;
    for (prefix, store) in sections {
        for p in store.iter() {
            let name = if prefix.is_empty() {
                p.name.clone()
            } else {
                format!("{prefix}.{}", p.name)
            };
            write_u32(w, name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            write_u32(w, p.shape.len() as u32)?;
            for &d in &p.shape {
                write_u32(w, d as u32)?;
            }
            for &v in &p.data {
                w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_records(r: &mut impl Read, path: &Path) -> Result<HashMap<String, (Vec<usize>, Vec<f32>)>> {
    let count = read_u32(r, path)? as usize;
    let mut records = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r, path)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| format_err(path, "truncated record name"))?;
        let name = String::from_utf8(name_buf).map_err(|_| format_err(path, "non-utf8 name"))?;
        let rank = read_u32(r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(r, path)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_f32(r, path)?);
        }
        records.insert(name, (shape, data));
    }
    Ok(records)
}

fn fill_store<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    records: &HashMap<String, (Vec<usize>, Vec<f32>)>,
    path: &Path,
) -> Result<()> {
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let key = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        let (shape, data) = records
            .get(&key)
            .ok_or_else(|| format_err(path, format!("missing record {key}")))?;
        let p = store.get_mut(&name);
        if *shape != p.shape {
            return Err(format_err(
                path,
                format!("record {key} has shape {:?}, expected {:?}", shape, p.shape),
            ));
        }
        p.data = data.iter().map(|&v| T::from_f64(v as f64)).collect();
    }
    Ok(())
}

fn write_checkpoint<T: Scalar>(
    path: &Path,
    meta: &CheckpointMeta,
    sections: &[(&str, &ParamStore<T>)],
) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::Config(e.to_string()))?;
    write_u32(&mut w, meta_json.len() as u32)?;
    w.write_all(&meta_json)?;
    write_records(&mut w, sections)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, HashMap<String, (Vec<usize>, Vec<f32>)>)> {
    let mut r = BufReader::new(open_file(path)?);
    check_magic(&mut r, CHECKPOINT_MAGIC, path)?;
    let meta_len = read_u32(&mut r, path)? as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)
        .map_err(|_| format_err(path, "truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&meta_buf).map_err(|e| format_err(path, e.to_string()))?;
    let records = read_records(&mut r, path)?;
    Ok((meta, records))
}

pub fn save_backbone<T: Scalar>(path: &Path, backbone: &crate::backbone::Backbone<T>) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "backbone".to_string(),
        backbone: backbone.cfg.clone(),
        model: None,
        input_extents: None,
    };
    write_checkpoint(path, &meta, &[("", &backbone.params)])
}

pub fn load_backbone<T: Scalar>(path: &Path) -> Result<crate::backbone::Backbone<T>> {
    let (meta, records) = read_checkpoint(path)?;
    if meta.kind != "backbone" {
        return Err(format_err(path, format!("checkpoint kind '{}', expected backbone", meta.kind)));
    }
    let mut backbone = crate::backbone::build_backbone::<T>(&meta.backbone, 0)?;
    fill_store(&mut backbone.params, "", &records, path)?;
    Ok(backbone)
}

/// Model checkpoints extend the backbone container with fusion records and a
/// model-config block.
pub fn save_model<T: Scalar>(path: &Path, model: &HrlModel<T>) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "hrl".to_string(),
        backbone: model.backbone.cfg.clone(),
        model: Some(model.cfg.clone()),
        input_extents: Some(model.input_extents),
    };
    write_checkpoint(
        path,
        &meta,
        &[("backbone", &model.backbone.params), ("fusion", &model.fusion)],
    )
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<HrlModel<T>> {
    let (meta, records) = read_checkpoint(path)?;
    if meta.kind != "hrl" {
        return Err(format_err(path, format!("checkpoint kind '{}', expected hrl", meta.kind)));
    }
    let model_cfg = meta
        .model
        .ok_or_else(|| format_err(path, "missing model config block"))?;
    let extents = meta
        .input_extents
        .ok_or_else(|| format_err(path, "missing input extents"))?;
    let mut model = build_model::<T>(&meta.backbone, &model_cfg, extents, 0)?;
    fill_store(&mut model.backbone.params, "backbone", &records, path)?;
    fill_store(&mut model.fusion, "fusion", &records, path)?;
    Ok(model)
}

// ---- CSV exports ------------------------------------------------------

pub fn write_features_csv(path: &Path, subjects: &[(&str, &FeatureVector)]) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    let names = subjects
        .first()
        .map(|(_, f)| f.names.clone())
        .unwrap_or_default();
    writeln!(w, "id,{}", names.join(","))?;
    for (id, f) in subjects {
        let vals: Vec<String> = f.values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{id},{}", vals.join(","))?;
    }
    Ok(())
}

fn read_features_csv(path: &Path) -> Result<HashMap<String, FeatureVector>> {
    let content =
        std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| format_err(path, "empty features csv"))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut map = HashMap::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(',');
        let id = cells
            .next()
            .ok_or_else(|| format_err(path, "missing id cell"))?
            .to_string();
        let values: Vec<f64> = cells
            .map(|c| c.parse().map_err(|_| format_err(path, format!("bad number '{c}'"))))
            .collect::<Result<_>>()?;
        if values.len() != names.len() {
            return Err(format_err(path, format!("row {id} has {} values", values.len())));
        }
        map.insert(
            id,
            FeatureVector {
                names: names.clone(),
                values,
            },
        );
    }
    Ok(map)
}

/// Write a dataset directory: `manifest.csv`, `atlas.atl`, `features.csv`,
/// and one volume file per subject under `volumes/`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("volumes"))?;
    write_atlas(&dir.join("atlas.atl"), &dataset.atlas)?;
    let feature_rows: Vec<(&str, &FeatureVector)> = dataset
        .subjects
        .iter()
        .map(|s| (s.id.as_str(), &s.features))
        .collect();
    write_features_csv(&dir.join("features.csv"), &feature_rows)?;
    let manifest = dir.join("manifest.csv");
    let mut w = BufWriter::new(create_file(&manifest)?);
    writeln!(w, "id,class,site,volume,features")?;
    for s in &dataset.subjects {
        let vol_rel = format!("volumes/{}.vol", s.id);
        write_volume(&dir.join(&vol_rel), &s.volume)?;
        writeln!(w, "{},{},{},{},features.csv", s.id, s.label, s.site, vol_rel)?;
    }
    Ok(manifest)
}

/// Read a dataset back from its manifest. The atlas is expected as
/// `atlas.atl` next to the manifest; volume/feature paths are relative to the
/// manifest directory.
pub fn read_dataset(manifest: &Path) -> Result<Dataset> {
    let dir = manifest
        .parent()
        .ok_or_else(|| format_err(manifest, "manifest has no parent directory"))?;
    let atlas = read_atlas(&dir.join("atlas.atl"))?;
    let content = std::fs::read_to_string(manifest)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest.display())))?;
    let mut lines = content.lines();
    let header = lines.next().ok_or_else(|| format_err(manifest, "empty manifest"))?;
    if header != "id,class,site,volume,features" {
        return Err(format_err(manifest, format!("unexpected header '{header}'")));
    }
    let mut feature_files: HashMap<String, HashMap<String, FeatureVector>> = HashMap::new();
    let mut subjects = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(format_err(manifest, format!("bad row '{line}'")));
        }
        let id = cells[0].to_string();
        let label: usize = cells[1]
            .parse()
            .map_err(|_| format_err(manifest, format!("bad class '{}'", cells[1])))?;
        let site: u8 = cells[2]
            .parse()
            .map_err(|_| format_err(manifest, format!("bad site '{}'", cells[2])))?;
        let volume = read_volume(&dir.join(cells[3]))?;
        let feats = feature_files
            .entry(cells[4].to_string())
            .or_insert_with(|| read_features_csv(&dir.join(cells[4])).unwrap_or_default());
        let features = feats
            .get(&id)
            .ok_or_else(|| format_err(manifest, format!("no features for subject {id}")))?
            .clone();
        subjects.push(Subject {
            id,
            volume,
            features,
            label,
            site,
        });
    }
    Ok(Dataset { atlas, subjects })
}

pub fn write_metrics_csv(
    path: &Path,
    run_id: &str,
    rows: &[(usize, usize, String, f64)], // (repeat, fold, metric, value)
) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    writeln!(w, "run_id,fold,repeat,metric,value")?;
    for (repeat, fold, metric, value) in rows {
        writeln!(w, "{run_id},{fold},{repeat},{metric},{value}")?;
    }
    Ok(())
}

pub fn write_confusion_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let k = report.confusion.len();
    let mut w = BufWriter::new(create_file(path)?);
    let header: Vec<String> = (0..k).map(|c| format!("pred{c}")).collect();
    writeln!(w, "true,{}", header.join(","))?;
    for (c, row) in report.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{c},{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_predictions_csv(path: &Path, rows: &[(usize, usize, &PredictionRow)]) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    let k = rows.first().map(|(_, _, r)| r.scores.len()).unwrap_or(0);
    let score_cols: Vec<String> = (0..k).map(|c| format!("score{c}")).collect();
    writeln!(w, "repeat,fold,id,true,predicted,{}", score_cols.join(","))?;
    for (repeat, fold, r) in rows {
        let scores: Vec<String> = r.scores.iter().map(|s| s.to_string()).collect();
        writeln!(
            w,
            "{repeat},{fold},{},{},{},{}",
            r.id,
            r.true_label,
            r.predicted,
            scores.join(",")
        )?;
    }
    Ok(())
}

/// Mean±std summary rows formatted like the usual results tables (percent,
/// two decimals). `scope` is `r<repeat>` for per-repeat rows or `all`.
pub fn write_summary_csv(path: &Path, rows: &[(String, String, f64, f64)]) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    writeln!(w, "scope,metric,mean,std,formatted")?;
    for (scope, name, mean, std) in rows {
        writeln!(
            w,
            "{scope},{name},{mean},{std},{}",
            format_mean_std_percent(*mean, *std)
        )?;
    }
    Ok(())
}

pub fn format_mean_std_percent(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", mean * 100.0, std * 100.0)
}

pub fn write_pooled_features_csv(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(create_file(path)?);
    let c = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let cols: Vec<String> = (0..c).map(|i| format!("f{i}")).collect();
    writeln!(w, "id,{}", cols.join(","))?;
    for (id, values) in rows {
        let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{id},{}", cells.join(","))?;
    }
    Ok(())
}

/// 8-bit binary portable graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::invalid("write_pgm", "pixel count does not match dimensions"));
    }
    let mut w = BufWriter::new(create_file(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Quantize one channel of a feature-map stack to mid-slice PGMs. Scaling is
/// min-max over the whole channel; constant channels map to mid-gray 128.
pub fn channel_slices_to_pgm(
    dir: &Path,
    base: &str,
    channel_data: &[f32],
    dims: [usize; 3],
) -> Result<Vec<PathBuf>> {
    let [d, h, w] = dims;
    let min = channel_data.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = channel_data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let quant = |v: f32| -> u8 {
        if max == min {
            128
        } else {
            ((v - min) / (max - min) * 255.0).round().clamp(0.0, 255.0) as u8
        }
    };
    let at = |z: usize, y: usize, x: usize| channel_data[(z * h + y) * w + x];
    let mut paths = Vec::new();

    let axial: Vec<u8> = {
        let z = d / 2;
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| quant(at(z, y, x))).collect()
    };
    let p = dir.join(format!("{base}_axial.pgm"));
    write_pgm(&p, w, h, &axial)?;
    paths.push(p);

    let sagittal: Vec<u8> = {
        let x = w / 2;
        (0..d).flat_map(|z| (0..h).map(move |y| (z, y))).map(|(z, y)| quant(at(z, y, x))).collect()
    };
    let p = dir.join(format!("{base}_sagittal.pgm"));
    write_pgm(&p, h, d, &sagittal)?;
    paths.push(p);

    let coronal: Vec<u8> = {
        let y = h / 2;
        (0..d).flat_map(|z| (0..w).map(move |x| (z, x))).map(|(z, x)| quant(at(z, y, x))).collect()
    };
    let p = dir.join(format!("{base}_coronal.pgm"));
    write_pgm(&p, w, d, &coronal)?;
    paths.push(p);

    Ok(paths)
}
