//! Volume preprocessing, augmentation, and handcrafted feature extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A 3-D scalar image, row-major in (D, H, W) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    /// Isotropic voxel spacing in arbitrary units.
    pub spacing: [f32; 3],
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(extents: [usize; 3], voxels: Vec<f32>) -> Self {
        assert_eq!(voxels.len(), extents.iter().product::<usize>());
        Volume {
            extents,
            spacing: [1.0; 3],
            voxels,
        }
    }

    pub fn numel(&self) -> usize {
        self.voxels.len()
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[(z * self.extents[1] + y) * self.extents[2] + x]
    }
}

pub const TISSUE_GM: u16 = 1;
pub const TISSUE_WM: u16 = 2;
pub const TISSUE_CSF: u16 = 3;

/// Voxel-wise ROI and tissue labeling aligned with its volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    /// 0 = background, 1..=R are ROI ids.
    pub roi_labels: Vec<u16>,
    /// 0 = background, then GM/WM/CSF.
    pub tissue_labels: Vec<u16>,
}

impl Atlas {
    pub fn roi_count(&self) -> u16 {
        self.roi_labels.iter().copied().max().unwrap_or(0)
    }

    pub fn check_aligned(&self, v: &Volume) -> Result<()> {
        if self.extents != v.extents {
            return Err(Error::invalid(
                "atlas",
                format!(
                    "atlas extents {:?} do not match volume extents {:?}",
                    self.extents, v.extents
                ),
            ));
        }
        Ok(())
    }
}

/// Monotone percentile landmark table for histogram standardization.
#[derive(Debug, Clone)]
pub struct LandmarkTable {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

impl LandmarkTable {
    pub fn new(source: Vec<f64>, target: Vec<f64>) -> Result<Self> {
        if source.len() != target.len() || source.len() < 2 {
            return Err(Error::invalid(
                "landmarks",
                "need equal-length source/target tables with at least two rows",
            ));
        }
        for pair in [&source, &target] {
            if pair.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(
                    "landmarks",
                    "landmark values must be strictly increasing",
                ));
            }
        }
        Ok(LandmarkTable { source, target })
    }

    /// Piecewise-linear map; values beyond the span extrapolate along the end
    /// segments.
    pub fn map(&self, v: f64) -> f64 {
        let s = &self.source;
        let t = &self.target;
        let n = s.len();
        let seg = if v <= s[0] {
            0
        } else if v >= s[n - 1] {
            n - 2
        } else {
            s.partition_point(|&x| x <= v).min(n - 1) - 1
        };
        let slope = (t[seg + 1] - t[seg]) / (s[seg + 1] - s[seg]);
        t[seg] + (v - s[seg]) * slope
    }
}

/// The default landmark levels: 1st and 99th percentiles plus deciles.
pub fn default_landmark_levels() -> Vec<f64> {
    let mut levels = vec![1.0];
    levels.extend((1..=9).map(|d| d as f64 * 10.0));
    levels.push(99.0);
    levels
}

/// Percentiles (linear interpolation) of the masked voxels; `mask=None` uses
/// every voxel.
pub fn percentile_landmarks(v: &Volume, levels: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut vals: Vec<f64> = match mask {
        Some(m) => v
            .voxels
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(&x, _)| x as f64)
            .collect(),
        None => v.voxels.iter().map(|&x| x as f64).collect(),
    };
    if vals.is_empty() {
        return Err(Error::invalid("landmarks", "mask selects no voxels"));
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    Ok(levels
        .iter()
        .map(|&p| {
            let rank = p / 100.0 * (n - 1) as f64;
            let lo = rank.floor() as usize;
            let hi = rank.ceil() as usize;
            let frac = rank - lo as f64;
            vals[lo] * (1.0 - frac) + vals[hi] * frac
        })
        .collect())
}

/// Remap intensities so each source landmark lands on its target. Identical
/// tables are the identity map and return the input unchanged.
pub fn histogram_standardize(v: &Volume, landmarks: &LandmarkTable) -> Result<Volume> {
    LandmarkTable::new(landmarks.source.clone(), landmarks.target.clone())?;
    if landmarks.source == landmarks.target {
        return Ok(v.clone());
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&x| landmarks.map(x as f64) as f32)
        .collect();
    Ok(Volume {
        extents: v.extents,
        spacing: v.spacing,
        voxels,
    })
}

/// Zero-mean/unit-variance normalization followed by min-max rescaling to
/// [0, 1]. A constant volume maps to all 0.5 by convention.
pub fn normalize_rescale(v: &Volume) -> Volume {
    let n = v.numel() as f64;
    let mean = v.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .voxels
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    if var == 0.0 {
        return Volume {
            extents: v.extents,
            spacing: v.spacing,
            voxels: vec![0.5; v.numel()],
        };
    }
    let std = var.sqrt();
    let z: Vec<f64> = v.voxels.iter().map(|&x| (x as f64 - mean) / std).collect();
    let min = z.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    Volume {
        extents: v.extents,
        spacing: v.spacing,
        voxels: z.iter().map(|&x| ((x - min) / span) as f32).collect(),
    }
}

/// Sampling ranges for the random affine augmentation; all zero means
/// identity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineRanges {
    pub rotate_deg: f64,
    /// Fractional scale jitter; each axis scales in [1-s, 1+s].
    pub scale: f64,
    pub translate_vox: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        AffineRanges {
            rotate_deg: 5.0,
            scale: 0.05,
            translate_vox: 2.0,
        }
    }
}

impl AffineRanges {
    pub fn zero() -> Self {
        AffineRanges {
            rotate_deg: 0.0,
            scale: 0.0,
            translate_vox: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotate_deg == 0.0 && self.scale == 0.0 && self.translate_vox == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotate_deg < 0.0 || self.scale < 0.0 || self.translate_vox < 0.0 {
            return Err(Error::invalid("random_affine", "ranges must be non-negative"));
        }
        if self.scale >= 1.0 {
            return Err(Error::invalid("random_affine", "scale range must be < 1"));
        }
        Ok(())
    }
}

/// Sample one affine map uniformly within `ranges` (deterministic per seed)
/// and resample the volume. Identity ranges return a bit-identical copy.
pub fn random_affine(v: &Volume, ranges: &AffineRanges, seed: u64) -> Result<Volume> {
    ranges.validate()?;
    if ranges.is_identity() {
        return Ok(v.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = |rng: &mut ChaCha8Rng, r: f64| if r == 0.0 { 0.0 } else { rng.gen_range(-r..=r) };
    let deg2rad = std::f64::consts::PI / 180.0;
    let angles = [
        unit(&mut rng, ranges.rotate_deg) * deg2rad,
        unit(&mut rng, ranges.rotate_deg) * deg2rad,
        unit(&mut rng, ranges.rotate_deg) * deg2rad,
    ];
    let scales = [
        1.0 + unit(&mut rng, ranges.scale),
        1.0 + unit(&mut rng, ranges.scale),
        1.0 + unit(&mut rng, ranges.scale),
    ];
    let translation = [
        unit(&mut rng, ranges.translate_vox),
        unit(&mut rng, ranges.translate_vox),
        unit(&mut rng, ranges.translate_vox),
    ];
    Ok(apply_affine(v, angles, scales, translation))
}

/// Resample with an explicit affine map: rotation (radians, about the volume
/// center, axes z/y/x), per-axis scaling, then translation in voxels.
/// Trilinear interpolation, zero fill outside the domain.
pub fn apply_affine(v: &Volume, angles: [f64; 3], scales: [f64; 3], translation: [f64; 3]) -> Volume {
    // Forward map: p -> R*S*(p - c) + c + t. We pull back each output voxel
    // through the inverse: src = S^-1 * R^T * (p - c - t) + c.
    let (sa, ca) = (angles[0].sin(), angles[0].cos());
    let (sb, cb) = (angles[1].sin(), angles[1].cos());
    let (sg, cg) = (angles[2].sin(), angles[2].cos());
    // R = Rz(g) * Ry(b) * Rx(a) over (z, y, x) coordinates.
    let r = [
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ];
    let c = [
        (v.extents[0] as f64 - 1.0) / 2.0,
        (v.extents[1] as f64 - 1.0) / 2.0,
        (v.extents[2] as f64 - 1.0) / 2.0,
    ];
    let [d, h, w] = v.extents;
    let mut out = vec![0.0f32; v.numel()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = [
                    z as f64 - c[0] - translation[0],
                    y as f64 - c[1] - translation[1],
                    x as f64 - c[2] - translation[2],
                ];
                // R^T * q, then divide by scales.
                let src = [
                    (r[0][0] * q[0] + r[1][0] * q[1] + r[2][0] * q[2]) / scales[0] + c[0],
                    (r[0][1] * q[0] + r[1][1] * q[1] + r[2][1] * q[2]) / scales[1] + c[1],
                    (r[0][2] * q[0] + r[1][2] * q[1] + r[2][2] * q[2]) / scales[2] + c[2],
                ];
                out[(z * h + y) * w + x] = trilinear(v, src);
            }
        }
    }
    Volume {
        extents: v.extents,
        spacing: v.spacing,
        voxels: out,
    }
}

fn trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let [d, h, w] = v.extents;
    let f = [p[0].floor(), p[1].floor(), p[2].floor()];
    let t = [p[0] - f[0], p[1] - f[1], p[2] - f[2]];
    let mut acc = 0.0f64;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let weight = (if dz == 0 { 1.0 - t[0] } else { t[0] })
                    * (if dy == 0 { 1.0 - t[1] } else { t[1] })
                    * (if dx == 0 { 1.0 - t[2] } else { t[2] });
                if weight == 0.0 {
                    continue;
                }
                let z = f[0] as isize + dz;
                let y = f[1] as isize + dy;
                let x = f[2] as isize + dx;
                if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
                    continue; // zero fill
                }
                acc += weight * v.at(z as usize, y as usize, x as usize) as f64;
            }
        }
    }
    acc as f32
}

/// A named feature vector; slot order is fixed by the atlas ROI count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

/// Slot layout: three R-wide tissue-mean blocks (GM, WM, CSF), then the
/// per-ROI volume and boundary-surface proxies. F = 5R.
pub fn feature_names(roi_count: u16) -> Vec<String> {
    let mut names = Vec::with_capacity(5 * roi_count as usize);
    for tissue in ["gm", "wm", "csf"] {
        for r in 1..=roi_count {
            names.push(format!("roi{r}.{tissue}.mean"));
        }
    }
    for r in 1..=roi_count {
        names.push(format!("roi{r}.volume"));
    }
    for r in 1..=roi_count {
        names.push(format!("roi{r}.surface"));
    }
    names
}

pub fn feature_len(roi_count: u16) -> usize {
    5 * roi_count as usize
}

/// Mean intensity per (ROI, tissue) pair plus per-ROI voxel-count volume and
/// 6-neighborhood boundary-voxel count. Empty intersections yield 0 with a
/// logged warning.
pub fn roi_statistics(v: &Volume, atlas: &Atlas) -> Result<FeatureVector> {
    atlas.check_aligned(v)?;
    let r_n = atlas.roi_count() as usize;
    let mut sums = vec![0.0f64; (r_n + 1) * 4];
    let mut counts = vec![0usize; (r_n + 1) * 4];
    let mut volumes = vec![0usize; r_n + 1];
    for (i, (&roi, &tissue)) in atlas.roi_labels.iter().zip(&atlas.tissue_labels).enumerate() {
        if roi == 0 {
            continue;
        }
        volumes[roi as usize] += 1;
        if (1..=3).contains(&tissue) {
            let slot = roi as usize * 4 + tissue as usize;
            sums[slot] += v.voxels[i] as f64;
            counts[slot] += 1;
        }
    }

    let [d, h, w] = atlas.extents;
    let mut surfaces = vec![0usize; r_n + 1];
    let label = |z: isize, y: isize, x: isize| -> u16 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            0
        } else {
            atlas.roi_labels[(z as usize * h + y as usize) * w + x as usize]
        }
    };
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let roi = label(z, y, x);
                if roi == 0 {
                    continue;
                }
                let boundary = label(z - 1, y, x) != roi
                    || label(z + 1, y, x) != roi
                    || label(z, y - 1, x) != roi
                    || label(z, y + 1, x) != roi
                    || label(z, y, x - 1) != roi
                    || label(z, y, x + 1) != roi;
                if boundary {
                    surfaces[roi as usize] += 1;
                }
            }
        }
    }

    let mut values = Vec::with_capacity(feature_len(atlas.roi_count()));
    for tissue in [TISSUE_GM, TISSUE_WM, TISSUE_CSF] {
        for r in 1..=r_n {
            let slot = r * 4 + tissue as usize;
            if counts[slot] == 0 {
                log::warn!("roi {r} has no voxels of tissue {tissue}; mean slot set to 0");
                values.push(0.0);
            } else {
                values.push(sums[slot] / counts[slot] as f64);
            }
        }
    }
    for r in 1..=r_n {
        values.push(volumes[r] as f64);
    }
    for r in 1..=r_n {
        values.push(surfaces[r] as f64);
    }
    Ok(FeatureVector {
        names: feature_names(atlas.roi_count()),
        values,
    })
}

/// Zero every voxel whose ROI label is not in `keep`. Background is always
/// zeroed; unknown ids are rejected.
pub fn apply_roi_mask(v: &Volume, atlas: &Atlas, keep: &[u16]) -> Result<Volume> {
    atlas.check_aligned(v)?;
    if keep.is_empty() {
        return Err(Error::invalid("apply_roi_mask", "keep set must be nonempty"));
    }
    let r = atlas.roi_count();
    if let Some(&bad) = keep.iter().find(|&&id| id == 0 || id > r) {
        return Err(Error::invalid(
            "apply_roi_mask",
            format!("unknown ROI id {bad} (atlas has 1..={r})"),
        ));
    }
    let mut in_keep = vec![false; r as usize + 1];
    for &id in keep {
        in_keep[id as usize] = true;
    }
    let voxels = v
        .voxels
        .iter()
        .zip(&atlas.roi_labels)
        .map(|(&x, &roi)| if in_keep[roi as usize] { x } else { 0.0 })
        .collect();
    Ok(Volume {
        extents: v.extents,
        spacing: v.spacing,
        voxels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(extents: [usize; 3], f: impl Fn(usize) -> f32) -> Volume {
        let n = extents.iter().product();
        Volume::new(extents, (0..n).map(f).collect())
    }

    #[test]
    fn identity_landmarks_return_input_exactly() {
        let v = volume([2, 3, 4], |i| (i as f32) * 0.37 - 2.0);
        let table = LandmarkTable::new(vec![0.0, 1.0, 5.0], vec![0.0, 1.0, 5.0]).unwrap();
        let out = histogram_standardize(&v, &table).unwrap();
        assert_eq!(out.voxels, v.voxels);
    }

    #[test]
    fn two_landmark_linear_segment() {
        let v = Volume::new([1, 1, 3], vec![0.0, 5.0, 10.0]);
        let table = LandmarkTable::new(vec![0.0, 10.0], vec![0.0, 1.0]).unwrap();
        let out = histogram_standardize(&v, &table).unwrap();
        assert_eq!(out.voxels, vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn non_monotone_table_rejected() {
        assert!(LandmarkTable::new(vec![0.0, 1.0, 1.0], vec![0.0, 0.5, 1.0]).is_err());
        assert!(LandmarkTable::new(vec![0.0, 2.0, 1.0], vec![0.0, 0.5, 1.0]).is_err());
    }

    #[test]
    fn standardization_preserves_rank_order() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = Volume::new([4, 4, 4], (0..64).map(|_| rng.gen_range(-3.0..7.0)).collect());
            let levels = default_landmark_levels();
            let source = percentile_landmarks(&v, &levels, None).unwrap();
            let target: Vec<f64> = levels.iter().map(|&p| p / 100.0).collect();
            let table = LandmarkTable::new(source, target).unwrap();
            let out = histogram_standardize(&v, &table).unwrap();

            let mut order_in: Vec<usize> = (0..64).collect();
            order_in.sort_by(|&a, &b| v.voxels[a].partial_cmp(&v.voxels[b]).unwrap());
            for pair in order_in.windows(2) {
                assert!(out.voxels[pair[0]] <= out.voxels[pair[1]]);
            }
        }
    }

    #[test]
    fn extrapolation_uses_end_segments() {
        let table = LandmarkTable::new(vec![0.0, 1.0, 3.0], vec![0.0, 10.0, 20.0]).unwrap();
        assert!((table.map(-1.0) + 10.0).abs() < 1e-12);
        assert!((table.map(5.0) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rescale_basics() {
        let v = Volume::new([1, 1, 3], vec![2.0, 4.0, 6.0]);
        let out = normalize_rescale(&v);
        assert_eq!(out.voxels, vec![0.0, 0.5, 1.0]);

        let constant = Volume::new([1, 1, 4], vec![7.0; 4]);
        assert_eq!(normalize_rescale(&constant).voxels, vec![0.5; 4]);
    }

    #[test]
    fn normalize_rescale_affine_invariance_and_idempotence() {
        let v = volume([3, 3, 3], |i| ((i * 31) % 11) as f32 - 4.0);
        let base = normalize_rescale(&v);
        let transformed = Volume::new(
            v.extents,
            v.voxels.iter().map(|&x| 2.5 * x + 17.0).collect(),
        );
        let out = normalize_rescale(&transformed);
        for (a, b) in base.voxels.iter().zip(&out.voxels) {
            assert!((a - b).abs() < 1e-6);
        }
        let twice = normalize_rescale(&base);
        for (a, b) in base.voxels.iter().zip(&twice.voxels) {
            assert!((a - b).abs() < 1e-6);
        }
        let min = base.voxels.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = base.voxels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn identity_affine_is_bit_exact() {
        let v = volume([5, 6, 7], |i| (i as f32).sin());
        let out = random_affine(&v, &AffineRanges::zero(), 42).unwrap();
        assert_eq!(out.voxels, v.voxels);
    }

    #[test]
    fn integer_translation_shifts_exactly() {
        let v = volume([4, 3, 3], |i| i as f32 + 1.0);
        let out = apply_affine(&v, [0.0; 3], [1.0; 3], [1.0, 0.0, 0.0]);
        // content moved +1 along axis 0: out[z] = in[z-1], zero-filled face at z=0
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.at(0, y, x), 0.0);
                for z in 1..4 {
                    assert_eq!(out.at(z, y, x), v.at(z - 1, y, x));
                }
            }
        }
    }

    #[test]
    fn affine_seed_determinism() {
        let v = volume([6, 6, 6], |i| ((i * 7) % 13) as f32);
        let ranges = AffineRanges::default();
        let a = random_affine(&v, &ranges, 5).unwrap();
        let b = random_affine(&v, &ranges, 5).unwrap();
        let c = random_affine(&v, &ranges, 6).unwrap();
        assert_eq!(a.voxels, b.voxels);
        assert_ne!(a.voxels, c.voxels);
    }

    fn toy_atlas() -> Atlas {
        // 1x1x6: ROI 1 = first three voxels, ROI 2 = next two, background last.
        Atlas {
            extents: [1, 1, 6],
            spacing: [1.0; 3],
            roi_labels: vec![1, 1, 1, 2, 2, 0],
            tissue_labels: vec![TISSUE_GM, TISSUE_GM, TISSUE_WM, TISSUE_GM, TISSUE_CSF, 0],
        }
    }

    #[test]
    fn roi_statistics_hand_example() {
        let atlas = toy_atlas();
        let v = Volume::new([1, 1, 6], vec![1.0, 3.0, 9.0, 5.0, 7.0, 100.0]);
        let f = roi_statistics(&v, &atlas).unwrap();
        assert_eq!(f.values.len(), feature_len(2));
        // GM means: roi1 {1,3} -> 2, roi2 {5} -> 5
        assert_eq!(f.values[0], 2.0);
        assert_eq!(f.values[1], 5.0);
        // WM means: roi1 {9}, roi2 empty -> 0
        assert_eq!(f.values[2], 9.0);
        assert_eq!(f.values[3], 0.0);
        // CSF: roi1 empty, roi2 {7}
        assert_eq!(f.values[4], 0.0);
        assert_eq!(f.values[5], 7.0);
        // volumes
        assert_eq!(f.values[6], 3.0);
        assert_eq!(f.values[7], 2.0);
        // all voxels in a 1-voxel-thick strip are boundary
        assert_eq!(f.values[8], 3.0);
        assert_eq!(f.values[9], 2.0);
        assert_eq!(f.names[0], "roi1.gm.mean");
        assert_eq!(f.names[6], "roi1.volume");
    }

    #[test]
    fn roi_statistics_constant_volume() {
        let atlas = toy_atlas();
        let v = Volume::new([1, 1, 6], vec![4.25; 6]);
        let f = roi_statistics(&v, &atlas).unwrap();
        // every nonempty mean slot equals the constant
        for (i, val) in f.values[..6].iter().enumerate() {
            if ![3usize, 4].contains(&i) {
                assert_eq!(*val, 4.25, "slot {i}");
            }
        }
    }

    #[test]
    fn roi_statistics_label_permutation_invariance() {
        // Permuting voxels within the same (roi, tissue) class leaves the
        // mean slots unchanged.
        let atlas = Atlas {
            extents: [1, 1, 4],
            spacing: [1.0; 3],
            roi_labels: vec![1, 1, 1, 1],
            tissue_labels: vec![TISSUE_GM, TISSUE_GM, TISSUE_GM, TISSUE_GM],
        };
        let a = Volume::new([1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Volume::new([1, 1, 4], vec![4.0, 1.0, 3.0, 2.0]);
        let fa = roi_statistics(&a, &atlas).unwrap();
        let fb = roi_statistics(&b, &atlas).unwrap();
        assert_eq!(fa.values, fb.values);
    }

    #[test]
    fn mask_keeps_only_selected_rois() {
        let atlas = toy_atlas();
        let v = Volume::new([1, 1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let keep_all = apply_roi_mask(&v, &atlas, &[1, 2]).unwrap();
        assert_eq!(keep_all.voxels, vec![1.0, 2.0, 3.0, 4.0, 5.0, 0.0]);
        let keep_one = apply_roi_mask(&v, &atlas, &[2]).unwrap();
        assert_eq!(keep_one.voxels, vec![0.0, 0.0, 0.0, 4.0, 5.0, 0.0]);
        assert!(apply_roi_mask(&v, &atlas, &[]).is_err());
        assert!(apply_roi_mask(&v, &atlas, &[3]).is_err());
        assert!(apply_roi_mask(&v, &atlas, &[0]).is_err());
    }

    #[test]
    fn masked_statistics_match_on_kept_rois() {
        let atlas = toy_atlas();
        let v = Volume::new([1, 1, 6], vec![1.5, 2.5, 3.5, 4.5, 5.5, 6.5]);
        let masked = apply_roi_mask(&v, &atlas, &[1]).unwrap();
        let f_all = roi_statistics(&v, &atlas).unwrap();
        let f_masked = roi_statistics(&masked, &atlas).unwrap();
        // ROI 1 slots agree (indices 0, 2, 4 are roi1 means)
        for i in [0usize, 2, 4] {
            assert_eq!(f_all.values[i], f_masked.values[i]);
        }
    }
}
