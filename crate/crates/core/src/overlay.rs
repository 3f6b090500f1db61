//! Axial slice PNG with ground truth and prediction overlaid.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::ArrayView3;

use crate::error::{Error, Result};

const TRUTH: [u8; 3] = [0, 220, 0];
const PRED: [u8; 3] = [230, 30, 30];
const BOTH: [u8; 3] = [240, 220, 0];
const ALPHA: f32 = 0.5;

/// Slice index with the most ground-truth foreground, or the middle slice.
pub fn most_foreground_slice(label: ArrayView3<u8>) -> usize {
    let mut best = (0usize, label.shape()[0] / 2);
    for (z, plane) in label.outer_iter().enumerate() {
        let n = plane.iter().filter(|&&v| v != 0).count();
        if n > best.0 {
            best = (n, z);
        }
    }
    best.1
}

/// Render slice `z` of `image` as grey, tinting truth green, prediction red
/// and their overlap yellow.
pub fn render_slice(
    image: ArrayView3<f32>,
    truth: ArrayView3<u8>,
    pred: Option<ArrayView3<u8>>,
    z: usize,
) -> Result<RgbImage> {
    let shape = image.shape();
    if truth.shape() != shape || pred.is_some_and(|p| p.shape() != shape) {
        return Err(Error::ShapeMismatch("overlay volumes differ in shape".into()));
    }
    if z >= shape[0] {
        return Err(Error::InvalidArgument(format!("slice {z} outside depth {}", shape[0])));
    }
    let plane = image.index_axis(ndarray::Axis(0), z);
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = (shape[1], shape[2]);
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = ((plane[[y, x]] - lo) / span * 255.0).clamp(0.0, 255.0);
            let t = truth[[z, y, x]] != 0;
            let p = pred.is_some_and(|p| p[[z, y, x]] != 0);
            let tint = match (t, p) {
                (true, true) => Some(BOTH),
                (true, false) => Some(TRUTH),
                (false, true) => Some(PRED),
                (false, false) => None,
            };
            let px = match tint {
                Some(c) => c.map(|c| ((1.0 - ALPHA) * g + ALPHA * c as f32) as u8),
                None => [g as u8; 3],
            };
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    Ok(out)
}

pub fn write_overlay(
    path: &Path,
    image: ArrayView3<f32>,
    truth: ArrayView3<u8>,
    pred: Option<ArrayView3<u8>>,
    z: Option<usize>,
) -> Result<()> {
    let z = z.unwrap_or_else(|| most_foreground_slice(truth));
    let img = render_slice(image, truth, pred, z)?;
    img.save(path).map_err(|e| Error::InvalidArgument(format!("writing {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn colours_and_slice_choice() {
        let img = Array3::from_shape_fn((3, 4, 4), |(_, y, x)| (y * 4 + x) as f32);
        let mut truth = Array3::<u8>::zeros((3, 4, 4));
        truth[[2, 1, 1]] = 1;
        truth[[2, 1, 2]] = 1;
        let mut pred = Array3::<u8>::zeros((3, 4, 4));
        pred[[2, 1, 2]] = 1;
        pred[[2, 3, 3]] = 1;
        assert_eq!(most_foreground_slice(truth.view()), 2);
        let out = render_slice(img.view(), truth.view(), Some(pred.view()), 2).unwrap();
        let [r, g, _] = out.get_pixel(1, 1).0;
        assert!(g > r);
        let [r, g, b] = out.get_pixel(2, 1).0;
        assert!(r > b && g > b);
        let [r, g, _] = out.get_pixel(3, 3).0;
        assert!(r > g);
        assert_eq!(out.get_pixel(0, 0).0, [0, 0, 0]);
    }

    #[test]
    fn writes_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array3::<f32>::zeros((2, 5, 6));
        let truth = Array3::<u8>::zeros((2, 5, 6));
        let path = dir.path().join("o.png");
        write_overlay(&path, img.view(), truth.view(), None, None).unwrap();
        let back = image::open(&path).unwrap();
        assert_eq!((back.width(), back.height()), (6, 5));
    }
}
