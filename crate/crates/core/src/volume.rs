//! Volumetric domain types.
//!
//! Arrays are stored C-ordered with spatial axes `(D, H, W)` = `(z, y, x)`;
//! spacing triples follow the same order.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary brain mask aligned with an image's spatial grid.
pub type BrainMask = Array3<bool>;

/// Multi-sequence intensity volume, shape `(C, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageVolume {
    data: Array4<f32>,
    spacing: [f64; 3],
    origin: [f64; 3],
}

impl ImageVolume {
    pub fn new(data: Array4<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if data.shape().iter().any(|&n| n == 0) {
            return Err(Error::InvalidVolume(format!(
                "shape {:?} has an empty axis",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "spacing {spacing:?} must be positive"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-finite intensity at flat index {pos}"
            )));
        }
        Ok(ImageVolume {
            data,
            spacing,
            origin,
        })
    }

    /// Single-channel convenience constructor.
    pub fn from_channel(channel: Array3<f32>, spacing: [f64; 3]) -> Result<Self> {
        Self::new(channel.insert_axis(Axis(0)), spacing, [0.0; 3])
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(Axis(0), c)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }
}

/// Integer class map, shape `(D, H, W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    data: Array3<u8>,
    num_classes: u8,
}

impl LabelVolume {
    pub fn new(data: Array3<u8>, num_classes: u8) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v >= num_classes) {
            return Err(Error::LabelOutOfRange {
                value: v as u32,
                num_classes,
            });
        }
        Ok(LabelVolume { data, num_classes })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn into_data(self) -> Array3<u8> {
        self.data
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// Closed vocabulary of lesion types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Metastasis,
    Meningioma,
    Schwannoma,
    Pituitary,
    Avm,
    Tn,
    Other,
    Synthetic,
}

impl Diagnosis {
    pub const ALL: [Diagnosis; 8] = [
        Diagnosis::Metastasis,
        Diagnosis::Meningioma,
        Diagnosis::Schwannoma,
        Diagnosis::Pituitary,
        Diagnosis::Avm,
        Diagnosis::Tn,
        Diagnosis::Other,
        Diagnosis::Synthetic,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Diagnosis::Metastasis => "metastasis",
            Diagnosis::Meningioma => "meningioma",
            Diagnosis::Schwannoma => "schwannoma",
            Diagnosis::Pituitary => "pituitary",
            Diagnosis::Avm => "avm",
            Diagnosis::Tn => "tn",
            Diagnosis::Other => "other",
            Diagnosis::Synthetic => "synthetic",
        }
    }

    /// Row label used in per-type report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Diagnosis::Metastasis => "Metastasis",
            Diagnosis::Meningioma => "Meningioma",
            Diagnosis::Schwannoma => "Schwannoma",
            Diagnosis::Pituitary => "Pituitary",
            Diagnosis::Avm => "AVM",
            Diagnosis::Tn => "TN",
            Diagnosis::Other => "Other tumors",
            Diagnosis::Synthetic => "Synthetic",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Diagnosis::ALL
            .into_iter()
            .find(|d| d.tag() == s)
            .ok_or_else(|| Error::UnknownDiagnosis(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// One validated case: image, labels, optional brain mask and metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub image: ImageVolume,
    pub label: LabelVolume,
    pub brain_mask: Option<BrainMask>,
    pub diagnosis: Diagnosis,
    pub split: Split,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        image: ImageVolume,
        label: LabelVolume,
        brain_mask: Option<BrainMask>,
        diagnosis: Diagnosis,
        split: Split,
    ) -> Result<Self> {
        let case_id = case_id.into();
        let spatial = image.spatial_shape();
        if label.shape() != spatial {
            return Err(Error::ShapeMismatch(format!(
                "case {case_id}: label {:?} vs image {:?}",
                label.shape(),
                spatial
            )));
        }
        if let Some(mask) = &brain_mask {
            if mask.shape() != spatial {
                return Err(Error::ShapeMismatch(format!(
                    "case {case_id}: mask {:?} vs image {:?}",
                    mask.shape(),
                    spatial
                )));
            }
        }
        Ok(CaseRecord {
            case_id,
            image,
            label,
            brain_mask,
            diagnosis,
            split,
        })
    }

    pub fn spatial_shape(&self) -> [usize; 3] {
        self.image.spatial_shape()
    }
}
