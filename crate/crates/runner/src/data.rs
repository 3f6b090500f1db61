//! Case loading, train/validation carving and per-epoch batch assembly.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4};
use rand::seq::SliceRandom;

use lesionbench_core::augment::augment_slice;
use lesionbench_core::preprocess::{preprocess_case, zscore_normalize};
use lesionbench_core::sampling::{sample_center_patch, sample_uniform_patch, PatchBatch, Sampler};
use lesionbench_core::seed::{derive_seed, rng};
use lesionbench_core::{load_case, CaseRecord, DatasetManifest, ManifestRow, Split};
use lesionbench_nn::Tensor;

use crate::config::{ExperimentConfig, PreprocessConfig};
use crate::error::{Result, RunnerError};

/// Load one manifest row and apply the configured preprocessing.
pub fn prepare_case(row: &ManifestRow, num_classes: u8, prep: &PreprocessConfig) -> Result<CaseRecord> {
    let case = load_case(row, num_classes)?;
    prepare_loaded(case, prep)
}

pub fn prepare_loaded(case: CaseRecord, prep: &PreprocessConfig) -> Result<CaseRecord> {
    Ok(match (&prep.crop, prep.zscore) {
        (Some(crop), _) => preprocess_case(&case, crop)?,
        (None, true) => CaseRecord {
            image: zscore_normalize(&case.image, None)?,
            ..case
        },
        (None, false) => case,
    })
}

pub fn load_split(manifest: &DatasetManifest, split: Split, num_classes: u8, prep: &PreprocessConfig) -> Result<Vec<CaseRecord>> {
    manifest.split(split).map(|r| prepare_case(r, num_classes, prep)).collect()
}

/// Deterministically hold out `round(n · fraction)` cases (at least one when
/// `n ≥ 2` and `fraction > 0`). Returns `(train, val)`.
pub fn carve_validation(mut cases: Vec<CaseRecord>, fraction: f64, seed: u64) -> (Vec<CaseRecord>, Vec<CaseRecord>) {
    let n = cases.len();
    let mut n_val = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng(derive_seed(seed, "validation", 0)));
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let mut train = Vec::with_capacity(n - n_val);
    let mut val = Vec::with_capacity(n_val);
    for (i, c) in cases.drain(..).enumerate() {
        if val_idx.contains(&i) {
            val.push(c);
        } else {
            train.push(c);
        }
    }
    (train, val)
}

/// Model input and flattened `(N, V)` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub labels: Vec<u8>,
}

/// Zero-pad the high end of each spatial axis up to a multiple of `div`.
pub fn pad_image(image: ArrayView4<f32>, div: [usize; 3]) -> Array4<f32> {
    let (c, d, h, w) = image.dim();
    let t = padded_shape([d, h, w], div);
    if t == [d, h, w] {
        return image.to_owned();
    }
    let mut out = Array4::zeros((c, t[0], t[1], t[2]));
    out.slice_mut(s![.., ..d, ..h, ..w]).assign(&image);
    out
}

pub fn pad_labels(labels: ArrayView3<u8>, div: [usize; 3]) -> Array3<u8> {
    let (d, h, w) = labels.dim();
    let t = padded_shape([d, h, w], div);
    let mut out = Array3::zeros((t[0], t[1], t[2]));
    out.slice_mut(s![..d, ..h, ..w]).assign(&labels);
    out
}

pub fn padded_shape(shape: [usize; 3], div: [usize; 3]) -> [usize; 3] {
    [shape[0].next_multiple_of(div[0]), shape[1].next_multiple_of(div[1]), shape[2].next_multiple_of(div[2])]
}

/// Stack `(C, D, H, W)` volumes into an `(N, C, D, H, W)` tensor.
pub fn stack_images<'a>(items: impl IntoIterator<Item = ArrayView4<'a, f32>>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<[usize; 4]> = None;
    let mut n = 0;
    for item in items {
        let (c, d, h, w) = item.dim();
        match shape {
            None => shape = Some([c, d, h, w]),
            Some(s) if s != [c, d, h, w] => {
                return Err(RunnerError::Config(format!(
                    "cannot batch volumes of shapes {s:?} and {:?}; use batch_size 1 or crop to a common extent",
                    [c, d, h, w]
                )))
            }
            _ => {}
        }
        data.extend(item.iter().map(|&v| v as f64));
        n += 1;
    }
    let [c, d, h, w] = shape.ok_or_else(|| RunnerError::Empty("empty batch".into()))?;
    Ok(Tensor::from_vec([n, c, d, h, w], data)?)
}

fn patch_batch(pb: PatchBatch) -> Result<Batch> {
    let (n, c, d, h, w) = pb.patches.dim();
    let input = Tensor::from_vec([n, c, d, h, w], pb.patches.iter().map(|&v| v as f64).collect())?;
    Ok(Batch {
        input,
        labels: pb.labels.iter().copied().collect(),
    })
}

/// All training batches of one epoch, in a seeded order.
pub fn epoch_batches(cfg: &ExperimentConfig, cases: &[CaseRecord], epoch: usize) -> Result<Vec<Batch>> {
    let seed = cfg.seed;
    let mut order_rng = rng(derive_seed(seed, "epoch", epoch as u64));
    let div = cfg.model.spatial_divisor();
    let bs = cfg.batch_size;
    match cfg.sampler {
        Sampler::TwoDim => {
            let mut items: Vec<(usize, usize)> = cases
                .iter()
                .enumerate()
                .flat_map(|(i, c)| (0..c.spatial_shape()[0]).map(move |z| (i, z)))
                .collect();
            items.shuffle(&mut order_rng);
            items
                .chunks(bs)
                .map(|chunk| {
                    let mut images = Vec::with_capacity(chunk.len());
                    let mut labels = Vec::new();
                    for &(i, z) in chunk {
                        let case = &cases[i];
                        let img = case.image.data().slice(s![.., z, .., ..]);
                        let lab = case.label.data().slice(s![z, .., ..]);
                        let item_seed = derive_seed(seed, &case.case_id, ((epoch as u64) << 32) | z as u64);
                        let (img, lab) = augment_slice(img, lab, &cfg.augment, item_seed)?;
                        let (c, h, w) = img.dim();
                        let vol = img.into_shape_with_order((c, 1, h, w)).expect("contiguous slice");
                        let lab = lab.into_shape_with_order((1, h, w)).expect("contiguous slice");
                        images.push(pad_image(vol.view(), div));
                        labels.extend(pad_labels(lab.view(), div).iter().copied());
                    }
                    Ok(Batch {
                        input: stack_images(images.iter().map(|a| a.view()))?,
                        labels,
                    })
                })
                .collect()
        }
        Sampler::ThreeDim => {
            let mut items: Vec<usize> = (0..cases.len()).collect();
            items.shuffle(&mut order_rng);
            items
                .chunks(bs)
                .map(|chunk| {
                    let images: Vec<Array4<f32>> = chunk.iter().map(|&i| pad_image(cases[i].image.data().view(), div)).collect();
                    let labels = chunk
                        .iter()
                        .flat_map(|&i| pad_labels(cases[i].label.data().view(), div).into_iter())
                        .collect();
                    Ok(Batch {
                        input: stack_images(images.iter().map(|a| a.view()))?,
                        labels,
                    })
                })
                .collect()
        }
        Sampler::UniformPatch | Sampler::CenterPatch => {
            let mut items: Vec<usize> = (0..cases.len()).collect();
            items.shuffle(&mut order_rng);
            items
                .into_iter()
                .map(|i| {
                    let case = &cases[i];
                    let s = derive_seed(seed, &case.case_id, epoch as u64);
                    let pb = if cfg.sampler == Sampler::UniformPatch {
                        sample_uniform_patch(case, &cfg.patch, bs, s)?
                    } else {
                        sample_center_patch(case, &cfg.patch, bs, s)?
                    };
                    patch_batch(pb)
                })
                .collect()
        }
    }
}
