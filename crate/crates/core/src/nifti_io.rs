//! NIfTI-1 reading and writing for single-channel volumes, label maps and masks.
//!
//! NIfTI stores `x` fastest; our arrays are `(z, y, x)` C-ordered, so the
//! axes are reversed on the way in and out. Spacing lives in `pixdim[1..4]`
//! and the physical origin in the sform/qform translation.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};

/// A single 3D channel plus its geometry.
#[derive(Debug, Clone)]
pub struct RawVolume<T> {
    pub data: Array3<T>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

fn nifti_err(path: &Path) -> impl FnOnce(nifti::NiftiError) -> Error + '_ {
    move |source| Error::Nifti {
        path: path.to_path_buf(),
        source,
    }
}

fn read_f32(path: &Path) -> Result<RawVolume<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(nifti_err(path))?;
    let header = obj.header().clone();
    let dyn_arr = obj.into_volume().into_ndarray::<f32>().map_err(nifti_err(path))?;
    let shape = dyn_arr.shape().to_vec();
    let xyz = match shape.len() {
        3 => dyn_arr.into_dimensionality::<Ix3>(),
        4 if shape[3] == 1 => dyn_arr
            .index_axis_move(ndarray::Axis(3), 0)
            .into_dimensionality::<Ix3>(),
        _ => {
            return Err(Error::InvalidVolume(format!(
                "{}: expected a 3D volume, found shape {shape:?}",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::InvalidVolume(e.to_string()))?;
    let data = xyz.reversed_axes().as_standard_layout().into_owned();

    let spacing = [
        header.pixdim[3].abs() as f64,
        header.pixdim[2].abs() as f64,
        header.pixdim[1].abs() as f64,
    ];
    let origin = if header.sform_code > 0 {
        [
            header.srow_z[3] as f64,
            header.srow_y[3] as f64,
            header.srow_x[3] as f64,
        ]
    } else {
        [
            header.quatern_z as f64,
            header.quatern_y as f64,
            header.quatern_x as f64,
        ]
    };
    Ok(RawVolume {
        data,
        spacing,
        origin,
    })
}

/// Read a real-valued channel.
pub fn read_channel(path: &Path) -> Result<RawVolume<f32>> {
    read_f32(path)
}

/// Read an integer label map; every value must be a non-negative integer < 256.
pub fn read_labels(path: &Path) -> Result<RawVolume<u8>> {
    let raw = read_f32(path)?;
    let mut data = Array3::<u8>::zeros(raw.data.raw_dim());
    for (dst, &v) in data.iter_mut().zip(raw.data.iter()) {
        if v < 0.0 || v.fract() != 0.0 || v > 255.0 {
            return Err(Error::InvalidVolume(format!(
                "{}: label value {v} is not a class index",
                path.display()
            )));
        }
        *dst = v as u8;
    }
    Ok(RawVolume {
        data,
        spacing: raw.spacing,
        origin: raw.origin,
    })
}

/// Read a binary mask; any nonzero voxel is inside.
pub fn read_mask(path: &Path) -> Result<RawVolume<bool>> {
    let raw = read_f32(path)?;
    Ok(RawVolume {
        data: raw.data.mapv(|v| v != 0.0),
        spacing: raw.spacing,
        origin: raw.origin,
    })
}

fn geometry_header(spacing: [f64; 3], origin: [f64; 3]) -> NiftiHeader {
    let (sz, sy, sx) = (spacing[0] as f32, spacing[1] as f32, spacing[2] as f32);
    let (oz, oy, ox) = (origin[0] as f32, origin[1] as f32, origin[2] as f32);
    let mut header = NiftiHeader::default();
    header.pixdim = [1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0];
    // millimetres, seconds
    header.xyzt_units = 2 | 8;
    header.qform_code = 1;
    header.sform_code = 1;
    header.quatern_b = 0.0;
    header.quatern_c = 0.0;
    header.quatern_d = 0.0;
    header.quatern_x = ox;
    header.quatern_y = oy;
    header.quatern_z = oz;
    header.srow_x = [sx, 0.0, 0.0, ox];
    header.srow_y = [0.0, sy, 0.0, oy];
    header.srow_z = [0.0, 0.0, sz, oz];
    header
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Write a float32 channel. A `.nii.gz` suffix selects gzip compression.
pub fn write_channel(path: &Path, data: &Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    ensure_parent(path)?;
    let header = geometry_header(spacing, origin);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data.view().reversed_axes())
        .map_err(nifti_err(path))
}

/// Write a uint8 label map.
pub fn write_labels(path: &Path, data: &Array3<u8>, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    ensure_parent(path)?;
    let header = geometry_header(spacing, origin);
    WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data.view().reversed_axes())
        .map_err(nifti_err(path))
}

/// Write a binary mask as uint8 {0, 1}.
pub fn write_mask(path: &Path, data: &Array3<bool>, spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    let bytes = data.mapv(u8::from);
    write_labels(path, &bytes, spacing, origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn channel_round_trip_keeps_axis_order_and_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.nii.gz");
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f32 + 0.25);
        write_channel(&path, &data, [2.0, 1.5, 1.0], [-10.0, 4.0, 7.5]).unwrap();
        let back = read_channel(&path).unwrap();
        assert_eq!(back.data, data);
        assert_eq!(back.spacing, [2.0, 1.5, 1.0]);
        assert_eq!(back.origin, [-10.0, 4.0, 7.5]);
    }

    #[test]
    fn labels_round_trip_uncompressed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.nii");
        let data = Array3::from_shape_fn((2, 3, 4), |(z, y, x)| ((z + y + x) % 5) as u8);
        write_labels(&path, &data, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(read_labels(&path).unwrap().data, data);
    }

    #[test]
    fn fractional_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.nii");
        let data = Array3::from_elem((2, 2, 2), 0.5f32);
        write_channel(&path, &data, [1.0; 3], [0.0; 3]).unwrap();
        assert!(read_labels(&path).is_err());
    }

    #[test]
    fn missing_file_is_reported() {
        let err = read_channel(Path::new("/nonexistent/x.nii")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
