//! Brain-centred cropping to a fixed physical extent and z-score normalisation.

use ndarray::{s, Array3, Array4, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BrainMask, CaseRecord, ImageVolume, LabelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CropSpec {
    /// Physical extent `(z, y, x)` in millimetres.
    pub extent_mm: [f64; 3],
    pub pad_value: f32,
}

impl Default for CropSpec {
    fn default() -> Self {
        CropSpec {
            extent_mm: [200.0; 3],
            pad_value: 0.0,
        }
    }
}

impl CropSpec {
    /// Output voxel count per axis, `round_half_up(extent / spacing)`.
    pub fn output_shape(&self, spacing: [f64; 3]) -> Result<[usize; 3]> {
        if self.extent_mm.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "crop extent {:?} must be positive",
                self.extent_mm
            )));
        }
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = ((self.extent_mm[a] / spacing[a]) + 0.5).floor().max(1.0) as usize;
        }
        Ok(out)
    }
}

/// Inclusive bounding box `(lo, hi)` of the mask's true voxels.
pub fn bounding_box(mask: ArrayView3<'_, bool>) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((z, y, x), &m) in mask.indexed_iter() {
        if m {
            any = true;
            for (a, v) in [z, y, x].into_iter().enumerate() {
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    any.then_some((lo, hi))
}

/// Start index of an `n`-voxel window centred on the box `[lo, hi]`; an odd
/// remainder puts the extra voxel on the high-index side.
fn window_start(lo: usize, hi: usize, n: usize) -> i64 {
    let twice = lo as i64 + hi as i64 - (n as i64 - 1);
    if twice >= 0 {
        (twice + 1) / 2
    } else {
        -((-twice) / 2)
    }
}

/// Copy `src` into an array of `shape` whose index 0 maps to `start` in `src`;
/// out-of-range voxels take `fill`.
fn crop_array<T: Copy>(src: ArrayView3<'_, T>, start: [i64; 3], shape: [usize; 3], fill: T) -> Array3<T> {
    let mut out = Array3::from_elem(shape, fill);
    let src_shape = src.shape();
    let mut dst_lo = [0usize; 3];
    let mut src_lo = [0usize; 3];
    let mut len = [0usize; 3];
    for a in 0..3 {
        let s0 = start[a].max(0);
        let s1 = (start[a] + shape[a] as i64).min(src_shape[a] as i64);
        if s1 <= s0 {
            return out;
        }
        src_lo[a] = s0 as usize;
        dst_lo[a] = (s0 - start[a]) as usize;
        len[a] = (s1 - s0) as usize;
    }
    out.slice_mut(s![
        dst_lo[0]..dst_lo[0] + len[0],
        dst_lo[1]..dst_lo[1] + len[1],
        dst_lo[2]..dst_lo[2] + len[2]
    ])
    .assign(&src.slice(s![
        src_lo[0]..src_lo[0] + len[0],
        src_lo[1]..src_lo[1] + len[1],
        src_lo[2]..src_lo[2] + len[2]
    ]));
    out
}

/// Window geometry shared by the image, label and mask crops.
fn crop_window(mask: ArrayView3<'_, bool>, spacing: [f64; 3], spec: &CropSpec) -> Result<([i64; 3], [usize; 3])> {
    let shape = spec.output_shape(spacing)?;
    let (lo, hi) = bounding_box(mask).ok_or(Error::EmptyMask)?;
    let start = [
        window_start(lo[0], hi[0], shape[0]),
        window_start(lo[1], hi[1], shape[1]),
        window_start(lo[2], hi[2], shape[2]),
    ];
    Ok((start, shape))
}

/// Crop image and labels to `spec.extent_mm`, centred on the mask's bounding
/// box. No resampling: voxel spacing is preserved.
pub fn crop_to_brain(
    image: &ImageVolume,
    label: &LabelVolume,
    brain_mask: &BrainMask,
    spec: &CropSpec,
) -> Result<(ImageVolume, LabelVolume)> {
    let spatial = image.spatial_shape();
    if brain_mask.shape() != spatial || label.shape() != spatial {
        return Err(Error::ShapeMismatch(format!(
            "image {spatial:?}, label {:?}, mask {:?}",
            label.shape(),
            brain_mask.shape()
        )));
    }
    let (start, shape) = crop_window(brain_mask.view(), image.spacing(), spec)?;
    Ok((
        crop_image(image, start, shape, spec.pad_value)?,
        LabelVolume::new(crop_array(label.data().view(), start, shape, 0), label.num_classes())?,
    ))
}

fn crop_image(image: &ImageVolume, start: [i64; 3], shape: [usize; 3], fill: f32) -> Result<ImageVolume> {
    let mut data = Array4::<f32>::zeros((image.channels(), shape[0], shape[1], shape[2]));
    for c in 0..image.channels() {
        data.index_axis_mut(Axis(0), c)
            .assign(&crop_array(image.channel(c), start, shape, fill));
    }
    let spacing = image.spacing();
    let mut origin = image.origin();
    for a in 0..3 {
        origin[a] += start[a] as f64 * spacing[a];
    }
    ImageVolume::new(data, spacing, origin)
}

/// Per-channel z-score over `region` (all voxels when `None`). Channels whose
/// standard deviation is below `1e-8` become all zeros.
pub fn zscore_normalize(image: &ImageVolume, region: Option<&BrainMask>) -> Result<ImageVolume> {
    if let Some(r) = region {
        if r.shape() != image.spatial_shape() {
            return Err(Error::ShapeMismatch(format!(
                "region {:?} vs image {:?}",
                r.shape(),
                image.spatial_shape()
            )));
        }
        if !r.iter().any(|&b| b) {
            return Err(Error::EmptyRegion);
        }
    }
    let mut data = image.data().clone();
    for mut channel in data.axis_iter_mut(Axis(0)) {
        let (mut n, mut sum) = (0usize, 0.0f64);
        let visit = |f: &mut dyn FnMut(f64)| match region {
            Some(r) => Zip::from(&channel).and(r).for_each(|&v, &inside| {
                if inside {
                    f(v as f64)
                }
            }),
            None => channel.iter().for_each(|&v| f(v as f64)),
        };
        visit(&mut |v| {
            n += 1;
            sum += v;
        });
        let mean = sum / n as f64;
        let mut sq = 0.0f64;
        visit(&mut |v| sq += (v - mean) * (v - mean));
        let std = (sq / n as f64).sqrt();
        if std < 1e-8 {
            channel.fill(0.0);
        } else {
            channel.mapv_inplace(|v| ((v as f64 - mean) / std) as f32);
        }
    }
    ImageVolume::new(data, image.spacing(), image.origin())
}

/// Crop (when a mask is present) and z-score a whole case. Without a mask the
/// crop is centred on the volume centre.
pub fn preprocess_case(case: &CaseRecord, spec: &CropSpec) -> Result<CaseRecord> {
    let spatial = case.spatial_shape();
    let full;
    let mask = match &case.brain_mask {
        Some(m) => m,
        None => {
            log::warn!("case {}: no brain mask, centring crop on the volume", case.case_id);
            full = Array3::from_elem(spatial, true);
            &full
        }
    };
    let (start, shape) = crop_window(mask.view(), case.image.spacing(), spec)?;
    let image = crop_image(&case.image, start, shape, spec.pad_value)?;
    let label = LabelVolume::new(
        crop_array(case.label.data().view(), start, shape, 0),
        case.label.num_classes(),
    )?;
    let brain_mask = case
        .brain_mask
        .as_ref()
        .map(|m| crop_array(m.view(), start, shape, false));
    let image = zscore_normalize(&image, None)?;
    CaseRecord::new(
        case.case_id.clone(),
        image,
        label,
        brain_mask,
        case.diagnosis,
        case.split,
    )
}
