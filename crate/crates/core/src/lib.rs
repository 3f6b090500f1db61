//! Core data handling for volumetric brain lesion segmentation benchmarks.
//!
//! The crate covers everything that does not involve a neural network:
//! case loading and NIfTI I/O, brain-centred cropping and z-scoring, 2D
//! augmentation, the four batch samplers with patch reassembly, the training
//! objectives with their analytic gradients, evaluation metrics, and a
//! synthetic case generator.

pub mod augment;
pub mod brats;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nifti_io;
pub mod overlay;
pub mod preprocess;
pub mod sampling;
pub mod seed;
pub mod synthgen;
pub mod volume;

pub use error::{Error, Result};
pub use manifest::{load_case, load_manifest, write_case, DatasetManifest, ManifestRow};
pub use volume::{BrainMask, CaseRecord, Diagnosis, ImageVolume, LabelVolume, Split};
