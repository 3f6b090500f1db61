//! Whole-case inference routed by batch sampler.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array3, Array4, Array5, ArrayView4, Axis};

use lesionbench_core::sampling::{reassemble, tile_for_inference, PatchSpec, Sampler};
use lesionbench_core::{CaseRecord, ImageVolume, LabelVolume};
use lesionbench_nn::{Model, Tensor};

use crate::checkpoint::Checkpoint;
use crate::data::pad_image;
use crate::error::Result;

/// Anything that maps a case to per-voxel class probabilities `(K, D, H, W)`.
pub trait Predictor: Sync {
    fn num_classes(&self) -> usize;
    fn probabilities(&self, case: &CaseRecord) -> Result<Array4<f64>>;
}

pub struct ModelPredictor {
    model: Model,
    sampler: Sampler,
    patch: PatchSpec,
    forwards: AtomicUsize,
}

impl ModelPredictor {
    pub fn new(model: Model, sampler: Sampler, patch: PatchSpec) -> Self {
        ModelPredictor {
            model,
            sampler,
            patch,
            forwards: AtomicUsize::new(0),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self::new(ck.model()?, ck.config.sampler, ck.config.patch))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Network evaluations performed so far.
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    /// Pad `(C, D, H, W)` to the model's divisor, run it, crop back.
    fn run(&self, image: ArrayView4<f32>) -> Result<Array4<f64>> {
        let (_, d, h, w) = image.dim();
        let padded = pad_image(image, self.model.config().spatial_divisor());
        let (c, pd, ph, pw) = padded.dim();
        let x = Tensor::from_vec([1, c, pd, ph, pw], padded.iter().map(|&v| v as f64).collect())?;
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let out = self.model.forward(x)?;
        let k = out.channels();
        let full = Array4::from_shape_vec((k, pd, ph, pw), out.into_data()).expect("model output shape");
        Ok(full.slice(s![.., ..d, ..h, ..w]).to_owned())
    }
}

impl Predictor for ModelPredictor {
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn probabilities(&self, case: &CaseRecord) -> Result<Array4<f64>> {
        let image = case.image.data();
        let [d, h, w] = case.spatial_shape();
        match self.sampler {
            Sampler::TwoDim => {
                let mut out = Array4::zeros((self.num_classes(), d, h, w));
                for z in 0..d {
                    let slab = image.slice(s![.., z..z + 1, .., ..]);
                    let p = self.run(slab)?;
                    out.slice_mut(s![.., z..z + 1, .., ..]).assign(&p);
                }
                Ok(out)
            }
            Sampler::ThreeDim => self.run(image.view()),
            Sampler::UniformPatch | Sampler::CenterPatch => {
                // volumes smaller than a patch are zero-padded first
                let target = [d.max(self.patch.size[0]), h.max(self.patch.size[1]), w.max(self.patch.size[2])];
                let padded;
                let case = if target != [d, h, w] {
                    let mut img = Array4::zeros((image.dim().0, target[0], target[1], target[2]));
                    img.slice_mut(s![.., ..d, ..h, ..w]).assign(image);
                    let mut lab = Array3::zeros((target[0], target[1], target[2]));
                    lab.slice_mut(s![..d, ..h, ..w]).assign(case.label.data());
                    padded = CaseRecord::new(
                        case.case_id.clone(),
                        ImageVolume::new(img, case.image.spacing(), case.image.origin())?,
                        LabelVolume::new(lab, case.label.num_classes())?,
                        None,
                        case.diagnosis,
                        case.split,
                    )?;
                    &padded
                } else {
                    case
                };
                let tiles = tile_for_inference(case, &self.patch)?;
                let [pd, ph, pw] = self.patch.size;
                let mut preds = Array5::zeros((tiles.len(), self.num_classes(), pd, ph, pw));
                for (i, patch) in tiles.patches.axis_iter(Axis(0)).enumerate() {
                    preds.index_axis_mut(Axis(0), i).assign(&self.run(patch)?);
                }
                let full = reassemble(preds.view(), &tiles.origins, tiles.source_shape)?;
                Ok(full.slice(s![.., ..d, ..h, ..w]).to_owned())
            }
        }
    }
}

/// Test hook: returns the one-hot ground truth.
pub struct OraclePredictor {
    pub num_classes: usize,
}

impl Predictor for OraclePredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, case: &CaseRecord) -> Result<Array4<f64>> {
        let label = case.label.data();
        let (d, h, w) = label.dim();
        Ok(Array4::from_shape_fn((self.num_classes, d, h, w), |(c, z, y, x)| {
            (label[[z, y, x]] as usize == c) as u8 as f64
        }))
    }
}

/// Test hook: certain background everywhere.
pub struct BackgroundPredictor {
    pub num_classes: usize,
}

impl Predictor for BackgroundPredictor {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn probabilities(&self, case: &CaseRecord) -> Result<Array4<f64>> {
        let [d, h, w] = case.spatial_shape();
        let mut p = Array4::zeros((self.num_classes, d, h, w));
        p.index_axis_mut(Axis(0), 0).fill(1.0);
        Ok(p)
    }
}

/// Per-voxel class of highest probability; ties go to the lowest class.
pub fn argmax(probs: ArrayView4<f64>) -> Array3<u8> {
    let (k, d, h, w) = probs.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        let mut best = 0;
        for c in 1..k {
            if probs[[c, z, y, x]] > probs[[best, z, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

pub fn predict_case(predictor: &dyn Predictor, case: &CaseRecord) -> Result<LabelVolume> {
    let probs = predictor.probabilities(case)?;
    Ok(LabelVolume::new(argmax(probs.view()), predictor.num_classes() as u8)?)
}
