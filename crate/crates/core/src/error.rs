use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("NIfTI error on {path}: {source}")]
    Nifti {
        path: PathBuf,
        #[source]
        source: nifti::NiftiError,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: PathBuf, reason: String },

    #[error("duplicate case_id {0:?} in manifest")]
    DuplicateCase(String),

    #[error("unknown diagnosis tag {0:?}")]
    UnknownDiagnosis(String),

    #[error("unknown split {0:?}")]
    UnknownSplit(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("label value {value} out of range for {num_classes} classes")]
    LabelOutOfRange { value: u32, num_classes: u8 },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty brain mask")]
    EmptyMask,

    #[error("empty region")]
    EmptyRegion,

    #[error("patch {patch:?} does not fit volume {volume:?}")]
    PatchTooLarge { patch: [usize; 3], volume: [usize; 3] },

    #[error("label volume has no foreground voxel")]
    NoForeground,

    #[error("origin {origin:?} with patch {patch:?} lies outside volume {volume:?}")]
    OriginOutOfBounds {
        origin: [usize; 3],
        patch: [usize; 3],
        volume: [usize; 3],
    },

    #[error("probabilities are not normalised (voxel {voxel} sums to {sum})")]
    NotNormalized { voxel: usize, sum: f64 },

    #[error("lesion of radius {radius_vox:?} voxels cannot fit volume {volume:?}")]
    LesionTooLarge { radius_vox: [f64; 3], volume: [usize; 3] },

    #[error("MetaImage {path}: {reason}")]
    MetaImage { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
