//! MetaImage (`.mha`/`.mhd`) reading and BraTS-style directory import.
//!
//! A BraTS 2015 patient directory holds one `.mha` per sequence
//! (`MR_T1`, `MR_T1c`, `MR_T2`, `MR_Flair`) and an `OT` ground-truth file,
//! each usually in its own sub-directory. Import converts every patient to
//! NIfTI and emits a manifest row with four stacked sequences.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::ZlibDecoder;
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestRow};
use crate::nifti_io::{self, RawVolume};
use crate::volume::{Diagnosis, Split};

/// Sequence order on the channel axis.
pub const SEQUENCES: [&str; 4] = ["t1", "t2", "t1c", "flair"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ElementType {
    U8,
    I8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "MET_UCHAR" => ElementType::U8,
            "MET_CHAR" => ElementType::I8,
            "MET_USHORT" => ElementType::U16,
            "MET_SHORT" => ElementType::I16,
            "MET_UINT" => ElementType::U32,
            "MET_INT" => ElementType::I32,
            "MET_FLOAT" => ElementType::F32,
            "MET_DOUBLE" => ElementType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ElementType::U8 | ElementType::I8 => 1,
            ElementType::U16 | ElementType::I16 => 2,
            ElementType::U32 | ElementType::I32 | ElementType::F32 => 4,
            ElementType::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], big_endian: bool) -> f32 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut buf = [0u8; $n];
                buf.copy_from_slice(b);
                if big_endian {
                    <$t>::from_be_bytes(buf) as f32
                } else {
                    <$t>::from_le_bytes(buf) as f32
                }
            }};
        }
        match self {
            ElementType::U8 => b[0] as f32,
            ElementType::I8 => b[0] as i8 as f32,
            ElementType::U16 => num!(u16, 2),
            ElementType::I16 => num!(i16, 2),
            ElementType::U32 => num!(u32, 4),
            ElementType::I32 => num!(i32, 4),
            ElementType::F32 => num!(f32, 4),
            ElementType::F64 => num!(f64, 8),
        }
    }
}

/// Read a 3D MetaImage into `(z, y, x)` order.
pub fn read_metaimage(path: &Path) -> Result<RawVolume<f32>> {
    let bad = |reason: String| Error::MetaImage {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;

    let mut fields = BTreeMap::new();
    let mut offset = 0usize;
    let mut data_file = None;
    while offset < bytes.len() {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|p| offset + p + 1)
            .unwrap_or(bytes.len());
        let line = String::from_utf8_lossy(&bytes[offset..end]).trim().to_string();
        offset = end;
        if let Some((k, v)) = line.split_once('=') {
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "ElementDataFile" {
                data_file = Some(v);
                break;
            }
            fields.insert(k, v);
        }
    }
    let data_file = data_file.ok_or_else(|| bad("missing ElementDataFile".into()))?;

    let get = |k: &str| fields.get(k).map(String::as_str);
    let dims: Vec<usize> = get("DimSize")
        .ok_or_else(|| bad("missing DimSize".into()))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| bad(format!("bad DimSize entry {s:?}"))))
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        return Err(bad(format!("expected 3 dimensions, found {}", dims.len())));
    }
    let parse_triple = |key: &str, default: f64| -> Result<[f64; 3]> {
        match get(key) {
            None => Ok([default; 3]),
            Some(s) => {
                let v: Vec<f64> = s
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(format!("bad {key} entry {t:?}"))))
                    .collect::<Result<_>>()?;
                if v.len() < 3 {
                    return Err(bad(format!("{key} needs 3 values")));
                }
                // file order is (x, y, z)
                Ok([v[2], v[1], v[0]])
            }
        }
    };
    let spacing = parse_triple("ElementSpacing", 1.0)?;
    let origin = parse_triple("Offset", 0.0).or_else(|_| parse_triple("Origin", 0.0))?;
    let elem = get("ElementType")
        .and_then(ElementType::parse)
        .ok_or_else(|| bad(format!("unsupported ElementType {:?}", get("ElementType"))))?;
    let big_endian = matches!(
        get("ElementByteOrderMSB").or(get("BinaryDataByteOrderMSB")),
        Some("True") | Some("true")
    );
    let compressed = matches!(get("CompressedData"), Some("True") | Some("true"));

    let raw: Vec<u8> = if data_file == "LOCAL" {
        bytes[offset..].to_vec()
    } else {
        let p = path.parent().unwrap_or_else(|| Path::new("")).join(&data_file);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))?
    };
    let raw = if compressed {
        let mut out = Vec::new();
        ZlibDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| bad(format!("zlib: {e}")))?;
        out
    } else {
        raw
    };

    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let n = nx * ny * nz;
    if raw.len() < n * elem.size() {
        return Err(bad(format!(
            "expected {} data bytes, found {}",
            n * elem.size(),
            raw.len()
        )));
    }
    let values: Vec<f32> = raw[..n * elem.size()]
        .chunks_exact(elem.size())
        .map(|b| elem.decode(b, big_endian))
        .collect();
    let data = Array3::from_shape_vec((nz, ny, nx), values).map_err(|e| bad(e.to_string()))?;
    Ok(RawVolume {
        data,
        spacing,
        origin,
    })
}

fn classify(name: &str) -> Option<&'static str> {
    let lower = name.to_ascii_lowercase();
    if lower.contains(".ot.") {
        Some("label")
    } else if lower.contains("mr_t1c") {
        Some("t1c")
    } else if lower.contains("mr_t1") {
        Some("t1")
    } else if lower.contains("mr_t2") {
        Some("t2")
    } else if lower.contains("mr_flair") {
        Some("flair")
    } else {
        None
    }
}

/// Patient directory for a `.mha`: the grandparent when the file sits in a
/// per-sequence folder of the same stem, otherwise the parent.
fn patient_dir(file: &Path) -> Option<PathBuf> {
    let parent = file.parent()?;
    let stem = file.file_stem()?.to_string_lossy();
    if parent.file_name()?.to_string_lossy() == stem {
        parent.parent().map(Path::to_path_buf)
    } else {
        Some(parent.to_path_buf())
    }
}

/// Convert every labelled BraTS patient under `root` to NIfTI in `out_dir`
/// and return the manifest. The last `test_fraction` of patients (sorted by
/// name) are assigned to the test split. Cases are tagged `other`; the brain
/// mask is the union of nonzero voxels over sequences.
pub fn import_brats(root: &Path, out_dir: &Path, test_fraction: f64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in [0, 1], got {test_fraction}"
        )));
    }
    let mut patients: BTreeMap<PathBuf, BTreeMap<&'static str, PathBuf>> = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(root, e.into()))?;
        let p = entry.path();
        let is_mha = p
            .extension()
            .map(|e| e.eq_ignore_ascii_case("mha") || e.eq_ignore_ascii_case("mhd"))
            .unwrap_or(false);
        if !entry.file_type().is_file() || !is_mha {
            continue;
        }
        let name = p.file_name().unwrap_or_default().to_string_lossy();
        if let (Some(kind), Some(dir)) = (classify(&name), patient_dir(p)) {
            patients.entry(dir).or_default().insert(kind, p.to_path_buf());
        }
    }

    let complete: Vec<_> = patients
        .into_iter()
        .filter(|(dir, files)| {
            let ok = SEQUENCES.iter().all(|s| files.contains_key(s)) && files.contains_key("label");
            if !ok {
                log::warn!("skipping {}: missing sequences or ground truth", dir.display());
            }
            ok
        })
        .collect();
    let n_test = (complete.len() as f64 * test_fraction).round() as usize;
    let first_test = complete.len() - n_test;

    let mut rows = Vec::with_capacity(complete.len());
    for (i, (dir, files)) in complete.into_iter().enumerate() {
        let case_id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("case{i:04}"));
        let mut image_paths = Vec::new();
        let mut mask: Option<Array3<bool>> = None;
        let mut geometry = None;
        let mut stacked = Vec::new();
        for seq in SEQUENCES {
            let vol = read_metaimage(&files[seq])?;
            let nonzero = vol.data.mapv(|v| v != 0.0);
            mask = Some(match mask {
                None => nonzero,
                Some(m) => {
                    if m.raw_dim() != nonzero.raw_dim() {
                        return Err(Error::ShapeMismatch(format!(
                            "{case_id}: sequence {seq} shape {:?}",
                            vol.data.shape()
                        )));
                    }
                    ndarray::Zip::from(&m).and(&nonzero).map_collect(|&a, &b| a || b)
                }
            });
            geometry.get_or_insert((vol.spacing, vol.origin));
            let path = out_dir.join(format!("{case_id}_{seq}.nii.gz"));
            nifti_io::write_channel(&path, &vol.data, vol.spacing, vol.origin)?;
            image_paths.push(path);
            stacked.push(vol.data);
        }
        let (spacing, origin) = geometry.expect("four sequences were read");
        let label = read_metaimage(&files["label"])?;
        let label_u8 = label.data.mapv(|v| v.max(0.0) as u8);
        if label_u8.raw_dim() != stacked[0].raw_dim() {
            return Err(Error::ShapeMismatch(format!(
                "{case_id}: label shape {:?} vs image {:?}",
                label_u8.shape(),
                stacked[0].shape()
            )));
        }
        let label_path = out_dir.join(format!("{case_id}_label.nii.gz"));
        nifti_io::write_labels(&label_path, &label_u8, spacing, origin)?;
        let mask_path = out_dir.join(format!("{case_id}_mask.nii.gz"));
        nifti_io::write_mask(&mask_path, mask.as_ref().expect("mask built"), spacing, origin)?;
        rows.push(ManifestRow {
            case_id,
            image_paths,
            label_path,
            mask_path: Some(mask_path),
            diagnosis: Diagnosis::Other,
            split: if i >= first_test { Split::Test } else { Split::Train },
        });
    }
    DatasetManifest::new(rows)
}
