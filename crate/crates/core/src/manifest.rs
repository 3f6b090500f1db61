//! Dataset manifest (CSV) and case loading.
//!
//! Header: `case_id,image_path,label_path,mask_path,diagnosis,split`.
//! `image_path` may list several sequences separated by `;`, stacked on the
//! channel axis in listed order. An empty `mask_path` means no mask.
//! Relative paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use ndarray::{Array4, Axis};

use crate::error::{Error, Result};
use crate::nifti_io;
use crate::volume::{CaseRecord, Diagnosis, ImageVolume, LabelVolume, Split};

pub const MANIFEST_HEADER: [&str; 6] = [
    "case_id",
    "image_path",
    "label_path",
    "mask_path",
    "diagnosis",
    "split",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub case_id: String,
    pub image_paths: Vec<PathBuf>,
    pub label_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub diagnosis: Diagnosis,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for row in &rows {
            if !seen.insert(row.case_id.as_str()) {
                return Err(Error::DuplicateCase(row.case_id.clone()));
            }
        }
        Ok(DatasetManifest { rows })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Write as CSV; paths under the manifest's directory are stored relative.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
        }
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        writer
            .write_record(MANIFEST_HEADER)
            .map_err(|e| csv_io(path, e))?;
        for row in &self.rows {
            let images = row
                .image_paths
                .iter()
                .map(|p| relative_to(p, base))
                .collect::<Vec<_>>()
                .join(";");
            let mask = row
                .mask_path
                .as_deref()
                .map(|p| relative_to(p, base))
                .unwrap_or_default();
            writer
                .write_record([
                    row.case_id.as_str(),
                    images.as_str(),
                    relative_to(&row.label_path, base).as_str(),
                    mask.as_str(),
                    row.diagnosis.tag(),
                    row.split.tag(),
                ])
                .map_err(|e| csv_io(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::MalformedManifest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

fn resolve(base: &Path, raw: &str) -> PathBuf {
    let p = Path::new(raw.trim());
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parse a manifest CSV. Paths are resolved but not checked for existence
/// until [`load_case`].
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let malformed = |reason: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason,
    };
    let base = path.parent().unwrap_or_else(|| Path::new("")).to_path_buf();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != MANIFEST_HEADER {
        return Err(malformed(format!(
            "expected header {:?}, found {:?}",
            MANIFEST_HEADER.join(","),
            got.join(",")
        )));
    }

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(format!("line {line}: {e}")))?;
        if record.len() != MANIFEST_HEADER.len() {
            return Err(malformed(format!(
                "line {line}: expected {} fields, found {}",
                MANIFEST_HEADER.len(),
                record.len()
            )));
        }
        let field = |k: usize| record.get(k).unwrap_or("").trim();
        let case_id = field(0);
        if case_id.is_empty() {
            return Err(malformed(format!("line {line}: empty case_id")));
        }
        let image_paths: Vec<PathBuf> = field(1)
            .split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| resolve(&base, s))
            .collect();
        if image_paths.is_empty() {
            return Err(malformed(format!("line {line}: empty image_path")));
        }
        if field(2).is_empty() {
            return Err(malformed(format!("line {line}: empty label_path")));
        }
        let mask_path = (!field(3).is_empty()).then(|| resolve(&base, field(3)));
        rows.push(ManifestRow {
            case_id: case_id.to_string(),
            image_paths,
            label_path: resolve(&base, field(2)),
            mask_path,
            diagnosis: field(4).parse()?,
            split: field(5).parse()?,
        });
    }
    DatasetManifest::new(rows)
}

/// Load and validate one case. `num_classes` bounds the label values.
pub fn load_case(row: &ManifestRow, num_classes: u8) -> Result<CaseRecord> {
    let mut channels = Vec::with_capacity(row.image_paths.len());
    for p in &row.image_paths {
        channels.push(nifti_io::read_channel(p)?);
    }
    let first = &channels[0];
    let spatial = first.data.raw_dim();
    for (p, ch) in row.image_paths.iter().zip(&channels).skip(1) {
        if ch.data.raw_dim() != spatial {
            return Err(Error::ShapeMismatch(format!(
                "case {}: sequence {} has shape {:?}, expected {:?}",
                row.case_id,
                p.display(),
                ch.data.shape(),
                first.data.shape()
            )));
        }
    }
    let (spacing, origin) = (first.spacing, first.origin);
    let (d, h, w) = (spatial[0], spatial[1], spatial[2]);
    let mut data = Array4::<f32>::zeros((channels.len(), d, h, w));
    for (c, ch) in channels.into_iter().enumerate() {
        data.index_axis_mut(Axis(0), c).assign(&ch.data);
    }
    let image = ImageVolume::new(data, spacing, origin)?;

    let labels = nifti_io::read_labels(&row.label_path)?;
    let label = LabelVolume::new(labels.data, num_classes)?;
    let brain_mask = match &row.mask_path {
        Some(p) => Some(nifti_io::read_mask(p)?.data),
        None => None,
    };
    CaseRecord::new(
        row.case_id.clone(),
        image,
        label,
        brain_mask,
        row.diagnosis,
        row.split,
    )
}

/// Write a case as NIfTI files under `dir` and return its manifest row.
pub fn write_case(case: &CaseRecord, dir: &Path) -> Result<ManifestRow> {
    let spacing = case.image.spacing();
    let origin = case.image.origin();
    let id = &case.case_id;
    let mut image_paths = Vec::new();
    for c in 0..case.image.channels() {
        let name = if case.image.channels() == 1 {
            format!("{id}_image.nii.gz")
        } else {
            format!("{id}_image_{c}.nii.gz")
        };
        let path = dir.join(name);
        nifti_io::write_channel(&path, &case.image.channel(c).to_owned(), spacing, origin)?;
        image_paths.push(path);
    }
    let label_path = dir.join(format!("{id}_label.nii.gz"));
    nifti_io::write_labels(&label_path, case.label.data(), spacing, origin)?;
    let mask_path = match &case.brain_mask {
        Some(mask) => {
            let p = dir.join(format!("{id}_mask.nii.gz"));
            nifti_io::write_mask(&p, mask, spacing, origin)?;
            Some(p)
        }
        None => None,
    };
    Ok(ManifestRow {
        case_id: id.clone(),
        image_paths,
        label_path,
        mask_path,
        diagnosis: case.diagnosis,
        split: case.split,
    })
}
