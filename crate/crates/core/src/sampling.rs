//! Batch samplers and patch reassembly.
//!
//! Four strategies turn a case into model inputs: every axial slice
//! (`two_dim`), the whole volume (`three_dim`), uniformly placed patches
//! (`uniform_patch`) and foreground-anchored patches (`center_patch`). At
//! inference, patch models run over a regular tiling and the per-patch class
//! probabilities are averaged back into a volume.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, Array4, Array5, ArrayView5, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::CaseRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    TwoDim,
    ThreeDim,
    UniformPatch,
    CenterPatch,
}

impl Sampler {
    pub fn key(self) -> &'static str {
        match self {
            Sampler::TwoDim => "two_dim",
            Sampler::ThreeDim => "three_dim",
            Sampler::UniformPatch => "uniform_patch",
            Sampler::CenterPatch => "center_patch",
        }
    }

    pub fn is_patch(self) -> bool {
        matches!(self, Sampler::UniformPatch | Sampler::CenterPatch)
    }
}

impl fmt::Display for Sampler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Sampler::TwoDim,
            Sampler::ThreeDim,
            Sampler::UniformPatch,
            Sampler::CenterPatch,
        ]
        .into_iter()
        .find(|k| k.key() == s)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown sampler {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub restrict_to_mask: bool,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: [64; 3],
            restrict_to_mask: false,
        }
    }
}

impl PatchSpec {
    pub fn check_fits(&self, volume: [usize; 3]) -> Result<()> {
        if self.size.iter().any(|&p| p == 0) || (0..3).any(|a| self.size[a] > volume[a]) {
            return Err(Error::PatchTooLarge {
                patch: self.size,
                volume,
            });
        }
        Ok(())
    }
}

/// Patches cut from one volume with their corner coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    /// `(N, C, pd, ph, pw)`
    pub patches: Array5<f32>,
    /// `(N, pd, ph, pw)`
    pub labels: Array4<u8>,
    pub origins: Vec<[usize; 3]>,
    pub source_shape: [usize; 3],
}

impl PatchBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn patch_size(&self) -> [usize; 3] {
        let s = self.labels.shape();
        [s[1], s[2], s[3]]
    }
}

/// One axial slice, `(C, H, W)` image and `(H, W)` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub index: usize,
    pub image: Array3<f32>,
    pub label: Array2<u8>,
}

/// Every axial slice exactly once, in index order.
pub fn sample_two_dim(case: &CaseRecord) -> impl Iterator<Item = SliceSample> + '_ {
    let depth = case.spatial_shape()[0];
    (0..depth).map(move |k| SliceSample {
        index: k,
        image: case.image.data().index_axis(Axis(1), k).to_owned(),
        label: case.label.data().index_axis(Axis(0), k).to_owned(),
    })
}

/// The whole volume, unchanged.
pub fn sample_three_dim(case: &CaseRecord) -> (Array4<f32>, Array3<u8>) {
    (case.image.data().clone(), case.label.data().clone())
}

/// Cut the windows at `origins` out of `case`.
pub fn extract_patches(case: &CaseRecord, origins: Vec<[usize; 3]>, size: [usize; 3]) -> Result<PatchBatch> {
    let shape = case.spatial_shape();
    let channels = case.image.channels();
    let n = origins.len();
    let mut patches = Array5::<f32>::zeros((n, channels, size[0], size[1], size[2]));
    let mut labels = Array4::<u8>::zeros((n, size[0], size[1], size[2]));
    for (i, o) in origins.iter().enumerate() {
        if (0..3).any(|a| o[a] + size[a] > shape[a]) {
            return Err(Error::OriginOutOfBounds {
                origin: *o,
                patch: size,
                volume: shape,
            });
        }
        let window = s![.., o[0]..o[0] + size[0], o[1]..o[1] + size[1], o[2]..o[2] + size[2]];
        patches
            .index_axis_mut(Axis(0), i)
            .assign(&case.image.data().slice(window));
        labels.index_axis_mut(Axis(0), i).assign(&case.label.data().slice(s![
            o[0]..o[0] + size[0],
            o[1]..o[1] + size[1],
            o[2]..o[2] + size[2]
        ]));
    }
    Ok(PatchBatch {
        patches,
        labels,
        origins,
        source_shape: shape,
    })
}

/// `n` patches with uniformly distributed positions. Without mask
/// restriction every in-bounds corner is equally likely; with it, only
/// corners whose patch centre lies inside the brain mask are eligible.
pub fn sample_uniform_patch(case: &CaseRecord, spec: &PatchSpec, n: usize, seed: u64) -> Result<PatchBatch> {
    let origins = uniform_patch_origins(case, spec, n, seed)?;
    extract_patches(case, origins, spec.size)
}

/// Corners drawn by [`sample_uniform_patch`], without extracting patches.
pub fn uniform_patch_origins(case: &CaseRecord, spec: &PatchSpec, n: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    let shape = case.spatial_shape();
    spec.check_fits(shape)?;
    let p = spec.size;
    let span = [shape[0] - p[0] + 1, shape[1] - p[1] + 1, shape[2] - p[2] + 1];
    let mut rng = seed::rng(seed);
    let origins = if spec.restrict_to_mask {
        let mask = case.brain_mask.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "case {}: restrict_to_mask requires a brain mask",
                case.case_id
            ))
        })?;
        let mut valid = Vec::new();
        for z in 0..span[0] {
            for y in 0..span[1] {
                for x in 0..span[2] {
                    if mask[[z + p[0] / 2, y + p[1] / 2, x + p[2] / 2]] {
                        valid.push([z, y, x]);
                    }
                }
            }
        }
        if valid.is_empty() {
            return Err(Error::EmptyMask);
        }
        (0..n).map(|_| valid[rng.random_range(0..valid.len())]).collect()
    } else {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(0..span[0]),
                    rng.random_range(0..span[1]),
                    rng.random_range(0..span[2]),
                ]
            })
            .collect()
    };
    Ok(origins)
}

/// `n` patches each containing at least one foreground voxel: a foreground
/// voxel is picked uniformly, then a corner uniformly among the in-bounds
/// windows that contain it.
pub fn sample_center_patch(case: &CaseRecord, spec: &PatchSpec, n: usize, seed: u64) -> Result<PatchBatch> {
    let origins = center_patch_origins(case, spec, n, seed)?;
    extract_patches(case, origins, spec.size)
}

/// Corners drawn by [`sample_center_patch`], without extracting patches.
pub fn center_patch_origins(case: &CaseRecord, spec: &PatchSpec, n: usize, seed: u64) -> Result<Vec<[usize; 3]>> {
    let shape = case.spatial_shape();
    spec.check_fits(shape)?;
    let p = spec.size;
    let foreground: Vec<[usize; 3]> = case
        .label
        .data()
        .indexed_iter()
        .filter(|(_, &v)| v != 0)
        .map(|((z, y, x), _)| [z, y, x])
        .collect();
    if foreground.is_empty() {
        return Err(Error::NoForeground);
    }
    let mut rng = seed::rng(seed);
    let origins = (0..n)
        .map(|_| {
            let v = foreground[rng.random_range(0..foreground.len())];
            let mut o = [0usize; 3];
            for a in 0..3 {
                let lo = (v[a] + 1).saturating_sub(p[a]);
                let hi = v[a].min(shape[a] - p[a]);
                o[a] = rng.random_range(lo..=hi);
            }
            o
        })
        .collect();
    Ok(origins)
}

/// Corners of a stride-`size` grid; the last window on each axis is clamped
/// to the high boundary so the volume is fully covered.
pub fn tile_origins(shape: [usize; 3], size: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    PatchSpec {
        size,
        restrict_to_mask: false,
    }
    .check_fits(shape)?;
    let axis = |a: usize| -> Vec<usize> {
        let mut v: Vec<usize> = (0..shape[a]).step_by(size[a]).map(|o| o.min(shape[a] - size[a])).collect();
        v.dedup();
        v
    };
    let (zs, ys, xs) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                out.push([z, y, x]);
            }
        }
    }
    Ok(out)
}

/// Deterministic inference tiling of a case.
pub fn tile_for_inference(case: &CaseRecord, spec: &PatchSpec) -> Result<PatchBatch> {
    let origins = tile_origins(case.spatial_shape(), spec.size)?;
    extract_patches(case, origins, spec.size)
}

/// Average per-patch class probabilities `(N, K, pd, ph, pw)` into a
/// `(K, D, H, W)` volume. Voxels covered by no patch are background-certain.
pub fn reassemble(
    predictions: ArrayView5<'_, f64>,
    origins: &[[usize; 3]],
    source_shape: [usize; 3],
) -> Result<Array4<f64>> {
    let (n, k, pd, ph, pw) = predictions.dim();
    if n != origins.len() {
        return Err(Error::ShapeMismatch(format!(
            "{n} predictions for {} origins",
            origins.len()
        )));
    }
    let size = [pd, ph, pw];
    let [d, h, w] = source_shape;
    let mut sum = Array4::<f64>::zeros((k, d, h, w));
    let mut count = Array3::<u32>::zeros((d, h, w));
    for (i, o) in origins.iter().enumerate() {
        if (0..3).any(|a| o[a] + size[a] > source_shape[a]) {
            return Err(Error::OriginOutOfBounds {
                origin: *o,
                patch: size,
                volume: source_shape,
            });
        }
        let mut dst = sum.slice_mut(s![.., o[0]..o[0] + pd, o[1]..o[1] + ph, o[2]..o[2] + pw]);
        dst += &predictions.index_axis(Axis(0), i);
        count
            .slice_mut(s![o[0]..o[0] + pd, o[1]..o[1] + ph, o[2]..o[2] + pw])
            .mapv_inplace(|c| c + 1);
    }
    for ((z, y, x), &c) in count.indexed_iter() {
        if c == 0 {
            sum[[0, z, y, x]] = 1.0;
        } else if c > 1 {
            let inv = c as f64;
            for ch in 0..k {
                sum[[ch, z, y, x]] /= inv;
            }
        }
    }
    Ok(sum)
}
