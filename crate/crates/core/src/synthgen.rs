//! Deterministic synthetic cases standing in for private clinical data.
//!
//! Each case is a smooth "brain" ellipsoid with additive Gaussian noise and
//! `K` brighter ellipsoidal lesions. Lesion volumes follow a two-piece
//! log-uniform law: half the mass on `[min, median]` and half on
//! `[median, max]`, so the configured median is the distribution median.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_case, DatasetManifest};
use crate::seed;
use crate::volume::{CaseRecord, Diagnosis, ImageVolume, LabelVolume, Split};

/// Lesion types assigned round-robin to generated cases.
pub const ROUND_ROBIN: [Diagnosis; 6] = [
    Diagnosis::Metastasis,
    Diagnosis::Meningioma,
    Diagnosis::Schwannoma,
    Diagnosis::Pituitary,
    Diagnosis::Avm,
    Diagnosis::Other,
];

/// Probability of exactly one lesion (1013 of 1688 clinical image sets);
/// counts above the minimum decay geometrically.
const SINGLE_LESION_PROB: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub volume_shape: [usize; 3],
    /// `(z, y, x)` in mm.
    pub spacing: [f64; 3],
    /// Inclusive range of lesion counts.
    pub lesion_count_range: [usize; 2],
    pub lesion_volume_range_mm3: [f64; 2],
    pub lesion_volume_median_mm3: f64,
    /// Intensity added inside lesions.
    pub lesion_intensity_contrast: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            volume_shape: [96, 96, 96],
            spacing: [2.0, 2.0, 2.0],
            lesion_count_range: [1, 34],
            lesion_volume_range_mm3: [20.0, 72646.0],
            lesion_volume_median_mm3: 1236.0,
            lesion_intensity_contrast: 1.0,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.volume_shape.iter().any(|&n| n == 0) {
            return bad(format!("volume shape {:?} must be positive", self.volume_shape));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        let [klo, khi] = self.lesion_count_range;
        if klo == 0 || klo > khi {
            return bad(format!("lesion count range {:?} is empty or allows zero lesions", self.lesion_count_range));
        }
        let [vlo, vhi] = self.lesion_volume_range_mm3;
        if !(vlo > 0.0 && vlo <= vhi) {
            return bad(format!("lesion volume range {:?} is empty", self.lesion_volume_range_mm3));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    fn draw_count<R: Rng>(&self, rng: &mut R) -> usize {
        let [lo, hi] = self.lesion_count_range;
        let mut k = lo;
        while k < hi && !rng.random_bool(SINGLE_LESION_PROB) {
            k += 1;
        }
        k
    }

    fn draw_volume<R: Rng>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.lesion_volume_range_mm3;
        if lo == hi {
            return lo;
        }
        let med = self.lesion_volume_median_mm3.clamp(lo, hi);
        let (a, b) = if rng.random_bool(0.5) { (lo, med) } else { (med, hi) };
        if a == b {
            return a;
        }
        (a.ln() + rng.random::<f64>() * (b.ln() - a.ln())).exp()
    }
}

/// Geometry of one generated lesion.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionInfo {
    pub center_vox: [f64; 3],
    pub radii_vox: [f64; 3],
    pub target_volume_mm3: f64,
    /// Rasterised voxel count of this lesion alone.
    pub voxel_count: usize,
}

fn brain_radii(shape: [usize; 3]) -> [f64; 3] {
    [shape[0] as f64 * 0.42, shape[1] as f64 * 0.42, shape[2] as f64 * 0.42]
}

fn centre(shape: [usize; 3]) -> [f64; 3] {
    [
        (shape[0] as f64 - 1.0) / 2.0,
        (shape[1] as f64 - 1.0) / 2.0,
        (shape[2] as f64 - 1.0) / 2.0,
    ]
}

fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

/// Generate case `index` together with its lesion geometry.
pub fn generate_case_with_lesions(config: &SynthConfig, index: usize) -> Result<(CaseRecord, Vec<LesionInfo>)> {
    config.validate()?;
    let shape = config.volume_shape;
    let mut rng = seed::rng(seed::derive_seed(config.seed, "synthgen", index as u64));

    let c = centre(shape);
    let br = brain_radii(shape);
    let mut image = Array3::<f32>::zeros(shape);
    let mut mask = Array3::from_elem(shape, false);
    let phase: [f64; 3] = [rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI, rng.random::<f64>() * 2.0 * PI];
    for ((z, y, x), v) in image.indexed_iter_mut() {
        let p = [z as f64, y as f64, x as f64];
        if inside(p, c, br) {
            mask[[z, y, x]] = true;
            let u = [p[0] / shape[0] as f64, p[1] / shape[1] as f64, p[2] / shape[2] as f64];
            let field = 0.1 * (2.0 * PI * u[0] + phase[0]).sin()
                + 0.1 * (2.0 * PI * u[1] + phase[1]).sin()
                + 0.1 * (2.0 * PI * u[2] + phase[2]).sin();
            *v = (1.0 + field) as f32;
        }
    }

    let voxel_mm3 = config.spacing.iter().product::<f64>();
    let count = config.draw_count(&mut rng);
    let mut labels = Array3::<u8>::zeros(shape);
    let mut lesions = Vec::with_capacity(count);
    for _ in 0..count {
        let volume = config.draw_volume(&mut rng);
        let r0 = (3.0 * volume / (4.0 * PI)).cbrt();
        // mild anisotropy with unit product keeps the volume
        let raw: [f64; 3] = [rng.random_range(0.8..1.25), rng.random_range(0.8..1.25), rng.random_range(0.8..1.25)];
        let norm = (raw[0] * raw[1] * raw[2]).cbrt();
        let radii = [
            r0 * raw[0] / norm / config.spacing[0],
            r0 * raw[1] / norm / config.spacing[1],
            r0 * raw[2] / norm / config.spacing[2],
        ];
        if (0..3).any(|a| 2.0 * radii[a] + 1.0 > shape[a] as f64) {
            return Err(Error::LesionTooLarge {
                radius_vox: radii,
                volume: shape,
            });
        }
        let lo = [radii[0], radii[1], radii[2]];
        let hi = [
            shape[0] as f64 - 1.0 - radii[0],
            shape[1] as f64 - 1.0 - radii[1],
            shape[2] as f64 - 1.0 - radii[2],
        ];
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> [f64; 3] {
            [
                rng.random_range(lo[0]..=hi[0]),
                rng.random_range(lo[1]..=hi[1]),
                rng.random_range(lo[2]..=hi[2]),
            ]
        };
        let mut center = draw(&mut rng);
        for _ in 0..1000 {
            if inside(center, c, br) {
                break;
            }
            center = draw(&mut rng);
        }

        let mut voxels = 0usize;
        let z0 = (center[0] - radii[0]).floor().max(0.0) as usize;
        let y0 = (center[1] - radii[1]).floor().max(0.0) as usize;
        let x0 = (center[2] - radii[2]).floor().max(0.0) as usize;
        let z1 = ((center[0] + radii[0]).ceil() as usize).min(shape[0] - 1);
        let y1 = ((center[1] + radii[1]).ceil() as usize).min(shape[1] - 1);
        let x1 = ((center[2] + radii[2]).ceil() as usize).min(shape[2] - 1);
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if inside([z as f64, y as f64, x as f64], center, radii) {
                        voxels += 1;
                        if labels[[z, y, x]] == 0 {
                            labels[[z, y, x]] = 1;
                            image[[z, y, x]] += config.lesion_intensity_contrast as f32;
                        }
                    }
                }
            }
        }
        lesions.push(LesionInfo {
            center_vox: center,
            radii_vox: radii,
            target_volume_mm3: volume,
            voxel_count: voxels,
        });
        if voxels == 0 {
            log::debug!("lesion of {volume:.1} mm3 ({voxel_mm3} mm3 voxels) rasterised to no voxel");
        }
    }
    if labels.iter().all(|&v| v == 0) {
        // sub-voxel lesions: mark the voxel nearest the first centre
        let p = lesions[0].center_vox.map(|v| v.round() as usize);
        labels[p] = 1;
        image[p] += config.lesion_intensity_contrast as f32;
        lesions[0].voxel_count = 1;
    }

    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma is finite and non-negative");
        image.mapv_inplace(|v| v + normal.sample(&mut rng) as f32);
    }

    let case = CaseRecord::new(
        format!("synth_{index:04}"),
        ImageVolume::from_channel(image, config.spacing)?,
        LabelVolume::new(labels, 2)?,
        Some(mask),
        ROUND_ROBIN[index % ROUND_ROBIN.len()],
        Split::Train,
    )?;
    Ok((case, lesions))
}

/// Generate case `index`; fully determined by `(config.seed, index)`.
pub fn generate_case(config: &SynthConfig, index: usize) -> Result<CaseRecord> {
    Ok(generate_case_with_lesions(config, index)?.0)
}

/// Generate `n` cases, write them under `out_dir` with a `manifest.csv`, and
/// return the manifest. The last `round(n * test_fraction)` cases form the
/// test split.
pub fn write_dataset(config: &SynthConfig, n: usize, test_fraction: f64, out_dir: &Path) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in [0, 1], got {test_fraction}"
        )));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut case = generate_case(config, i)?;
        if i >= n - n_test {
            case.split = Split::Test;
        }
        rows.push(write_case(&case, out_dir)?);
    }
    let manifest = DatasetManifest::new(rows)?;
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
