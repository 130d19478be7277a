//! Deterministic synthetic phantoms: a Voronoi ROI atlas with concentric
//! tissue shells, plus labeled subject volumes whose class signal is built
//! from three orthogonal effect channels (ROI intensity shifts, zero-mean
//! sinusoidal texture, ROI atrophy).
//!
//! Intensity shifts move ROI means, so they are visible to the handcrafted
//! feature stream; texture is zero-mean within ROIs, so only the image stream
//! can see it. That split is what makes the fusion ablations measurable on
//! synthetic data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{roi_statistics, Atlas, FeatureVector, Volume, TISSUE_CSF, TISSUE_GM, TISSUE_WM};

pub const BASE_INTENSITY: [f32; 4] = [0.0, 0.5, 0.8, 0.2]; // bg, GM, WM, CSF

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassEffect {
    pub intensity_shift: f64,
    pub intensity_rois: Vec<u16>,
    /// Cycles along the volume diagonal; 0 disables the texture channel.
    pub texture_freq: f64,
    pub texture_amp: f64,
    pub atrophy_fraction: f64,
    pub atrophy_rois: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    pub roi_count: u16,
    pub class_effects: Vec<ClassEffect>,
    pub noise_std: f64,
    pub subjects_per_class: Vec<usize>,
    /// Global intensity bias applied to site-1 subjects, mimicking an
    /// inter-scanner shift.
    #[serde(default)]
    pub site_bias: f64,
}

impl PhantomConfig {
    pub fn classes(&self) -> usize {
        self.class_effects.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi_count < 2 {
            return Err(Error::Config("roi_count must be >= 2".into()));
        }
        if self.extents.iter().any(|&e| e < 8) {
            return Err(Error::Config("extents must be >= 8 per axis".into()));
        }
        if self.class_effects.len() < 2 || self.subjects_per_class.len() != self.class_effects.len()
        {
            return Err(Error::Config(
                "need >= 2 classes with one subject count per class".into(),
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        for (k, e) in self.class_effects.iter().enumerate() {
            if !(0.0..1.0).contains(&e.atrophy_fraction) {
                return Err(Error::Config(format!(
                    "class {k}: atrophy_fraction must be in [0, 1)"
                )));
            }
            if e.texture_amp < 0.0 || e.texture_freq < 0.0 {
                return Err(Error::Config(format!("class {k}: effect magnitudes must be >= 0")));
            }
            for &r in e.intensity_rois.iter().chain(&e.atrophy_rois) {
                if r == 0 || r > self.roi_count {
                    return Err(Error::Config(format!(
                        "class {k}: ROI id {r} outside 1..={}",
                        self.roi_count
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One labeled subject.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub volume: Volume,
    pub features: FeatureVector,
    pub label: usize,
    pub site: u8,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub atlas: Atlas,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn class_count(&self) -> usize {
        self.subjects.iter().map(|s| s.label).max().map_or(0, |m| m + 1)
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count()];
        for s in &self.subjects {
            hist[s.label] += 1;
        }
        hist
    }

    pub fn extents(&self) -> [usize; 3] {
        self.atlas.extents
    }

    pub fn feature_len(&self) -> usize {
        self.subjects.first().map_or(0, |s| s.features.values.len())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Stable per-subject seed derivation.
pub fn subject_seed(seed: u64, class: usize, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64((class as u64) << 32 | index as u64))
}

/// Partition an ellipsoidal foreground into `r` Voronoi ROIs around seeded
/// sites, with concentric tissue shells per ROI (WM core, GM middle, CSF rim).
pub fn generate_atlas(extents: [usize; 3], r: u16, seed: u64) -> Result<Atlas> {
    if r < 2 {
        return Err(Error::Config("need at least two ROIs".into()));
    }
    if extents.iter().any(|&e| e < 8) {
        return Err(Error::Config("extents must be >= 8 per axis".into()));
    }
    let [d, h, w] = extents;
    let center = [
        (d as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
    ];
    let semi = [0.45 * d as f64, 0.45 * h as f64, 0.45 * w as f64];
    let inside = |z: usize, y: usize, x: usize| -> bool {
        let dz = (z as f64 - center[0]) / semi[0];
        let dy = (y as f64 - center[1]) / semi[1];
        let dx = (x as f64 - center[2]) / semi[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    };

    let foreground: Vec<[usize; 3]> = (0..d)
        .flat_map(|z| (0..h).flat_map(move |y| (0..w).map(move |x| [z, y, x])))
        .filter(|&[z, y, x]| inside(z, y, x))
        .collect();
    if (r as usize) > foreground.len() {
        return Err(Error::Config(format!(
            "{} ROIs exceed the {} foreground voxels",
            r,
            foreground.len()
        )));
    }

    // Distinct site voxels, drawn by index without replacement.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<[usize; 3]> = Vec::with_capacity(r as usize);
    let mut taken = vec![false; foreground.len()];
    while sites.len() < r as usize {
        let i = rng.gen_range(0..foreground.len());
        if !taken[i] {
            taken[i] = true;
            sites.push(foreground[i]);
        }
    }

    let mut roi_labels = vec![0u16; d * h * w];
    let mut dist2 = vec![0f64; d * h * w];
    let mut max_dist2 = vec![0f64; r as usize + 1];
    for &[z, y, x] in &foreground {
        let mut best = f64::INFINITY;
        let mut best_site = 0u16;
        for (si, &[sz, sy, sx]) in sites.iter().enumerate() {
            let dz = z as f64 - sz as f64;
            let dy = y as f64 - sy as f64;
            let dx = x as f64 - sx as f64;
            let dd = dz * dz + dy * dy + dx * dx;
            if dd < best {
                best = dd;
                best_site = si as u16 + 1;
            }
        }
        let idx = (z * h + y) * w + x;
        roi_labels[idx] = best_site;
        dist2[idx] = best;
        if best > max_dist2[best_site as usize] {
            max_dist2[best_site as usize] = best;
        }
    }

    let mut tissue_labels = vec![0u16; d * h * w];
    for &[z, y, x] in &foreground {
        let idx = (z * h + y) * w + x;
        let roi = roi_labels[idx] as usize;
        let dmax = max_dist2[roi];
        let rel = if dmax == 0.0 {
            0.0
        } else {
            (dist2[idx] / dmax).sqrt()
        };
        tissue_labels[idx] = if rel <= 0.4 {
            TISSUE_WM
        } else if rel <= 0.75 {
            TISSUE_GM
        } else {
            TISSUE_CSF
        };
    }

    Ok(Atlas {
        extents,
        spacing: [1.0; 3],
        roi_labels,
        tissue_labels,
    })
}

/// Erosion depth of every voxel of `roi`: 1 at the 6-neighborhood boundary,
/// growing inward. Used to peel atrophied ROIs boundary-first.
fn erosion_order(atlas: &Atlas, roi: u16) -> Vec<usize> {
    let [d, h, w] = atlas.extents;
    let label = |z: isize, y: isize, x: isize| -> u16 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            0
        } else {
            atlas.roi_labels[(z as usize * h + y as usize) * w + x as usize]
        }
    };
    let mut depth = vec![0u32; d * h * w];
    let mut frontier: Vec<usize> = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if label(z, y, x) != roi {
                    continue;
                }
                let boundary = label(z - 1, y, x) != roi
                    || label(z + 1, y, x) != roi
                    || label(z, y - 1, x) != roi
                    || label(z, y + 1, x) != roi
                    || label(z, y, x - 1) != roi
                    || label(z, y, x + 1) != roi;
                if boundary {
                    let idx = (z as usize * h + y as usize) * w + x as usize;
                    depth[idx] = 1;
                    frontier.push(idx);
                }
            }
        }
    }
    let mut level = 1u32;
    let mut all: Vec<usize> = frontier.clone();
    while !frontier.is_empty() {
        level += 1;
        let mut next = Vec::new();
        for &idx in &frontier {
            let z = (idx / (h * w)) as isize;
            let y = ((idx / w) % h) as isize;
            let x = (idx % w) as isize;
            for (dz, dy, dx) in [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)]
            {
                let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                if label(nz, ny, nx) != roi {
                    continue;
                }
                let nidx = (nz as usize * h + ny as usize) * w + nx as usize;
                if depth[nidx] == 0 {
                    depth[nidx] = level;
                    next.push(nidx);
                }
            }
        }
        all.extend(&next);
        frontier = next;
    }
    // Boundary-first, ties by flat index for determinism.
    all.sort_by_key(|&idx| (depth[idx], idx));
    all
}

/// Synthesize one subject volume for class `k`: tissue base intensities,
/// class effects, then Gaussian noise. Deterministic per seed.
pub fn generate_subject(atlas: &Atlas, k: usize, config: &PhantomConfig, seed: u64) -> Result<Volume> {
    config.validate()?;
    if k >= config.classes() {
        return Err(Error::Config(format!(
            "class {k} out of range for {} classes",
            config.classes()
        )));
    }
    let effect = &config.class_effects[k];
    let [d, h, w] = atlas.extents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut voxels = vec![0.0f32; d * h * w];
    let in_shift = {
        let mut set = vec![false; config.roi_count as usize + 1];
        for &r in &effect.intensity_rois {
            set[r as usize] = true;
        }
        set
    };
    let diag = (d + h + w) as f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let roi = atlas.roi_labels[idx];
                if roi == 0 {
                    continue;
                }
                let mut v = BASE_INTENSITY[atlas.tissue_labels[idx] as usize] as f64;
                if in_shift[roi as usize] {
                    v += effect.intensity_shift;
                }
                if effect.texture_amp > 0.0 && effect.texture_freq > 0.0 {
                    let s = (z + y + x) as f64 / diag;
                    v += effect.texture_amp
                        * (std::f64::consts::TAU * effect.texture_freq * s + phase).sin();
                }
                voxels[idx] = v as f32;
            }
        }
    }

    if effect.atrophy_fraction > 0.0 {
        for &roi in &effect.atrophy_rois {
            let order = erosion_order(atlas, roi);
            let remove = (effect.atrophy_fraction * order.len() as f64).floor() as usize;
            for &idx in &order[..remove] {
                voxels[idx] = 0.0;
            }
        }
    }

    if config.noise_std > 0.0 {
        for v in &mut voxels {
            let z: f64 = rng.sample(StandardNormal);
            *v += (z * config.noise_std) as f32;
        }
    }

    Ok(Volume {
        extents: atlas.extents,
        spacing: [1.0; 3],
        voxels,
    })
}

/// Generate the whole dataset: `subjects_per_class[k]` subjects per class,
/// alternating site tags within each class, feature cache filled from the
/// stored volumes.
pub fn generate_dataset(config: &PhantomConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let atlas = generate_atlas(config.extents, config.roi_count, splitmix64(seed ^ 0xa71a5))?;
    generate_dataset_on(&atlas, config, seed)
}

/// Generate subjects on an existing atlas. Lets several datasets (train,
/// held-out test, effect probes) share one anatomy with fresh noise.
pub fn generate_dataset_on(atlas: &Atlas, config: &PhantomConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    if atlas.extents != config.extents || atlas.roi_count() != config.roi_count {
        return Err(Error::Config(format!(
            "atlas ({:?}, {} ROIs) does not match config ({:?}, {} ROIs)",
            atlas.extents,
            atlas.roi_count(),
            config.extents,
            config.roi_count
        )));
    }
    let mut subjects = Vec::new();
    let mut global = 0usize;
    for (k, &count) in config.subjects_per_class.iter().enumerate() {
        for i in 0..count {
            let mut volume = generate_subject(atlas, k, config, subject_seed(seed, k, i))?;
            let site = (i % 2) as u8;
            if site == 1 && config.site_bias != 0.0 {
                for (v, &roi) in volume.voxels.iter_mut().zip(&atlas.roi_labels) {
                    if roi != 0 {
                        *v += config.site_bias as f32;
                    }
                }
            }
            let features = roi_statistics(&volume, atlas)?;
            subjects.push(Subject {
                id: format!("s{global:04}"),
                volume,
                features,
                label: k,
                site,
            });
            global += 1;
        }
    }
    Ok(Dataset {
        atlas: atlas.clone(),
        subjects,
    })
}
