//! Training-time 2D augmentation for slice-based models: translation,
//! rotation, shear, zoom, brightness and elastic distortion.
//!
//! One parameter draw per call, fully determined by the seed. The geometric
//! transform is shared by image (bilinear) and label (nearest neighbour);
//! brightness touches the image only. Out-of-bounds samples read as 0.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Maximum translation as a fraction of the slice extent.
    pub max_shift_frac: f64,
    pub max_rotate_deg: f64,
    pub max_shear: f64,
    pub zoom_range: [f64; 2],
    /// Maximum additive intensity offset, in z-score units.
    pub brightness_frac: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_shift_frac: 0.1,
            max_rotate_deg: 10.0,
            max_shear: 0.1,
            zoom_range: [0.9, 1.1],
            brightness_frac: 0.1,
            elastic_alpha: 720.0,
            elastic_sigma: 24.0,
            enabled: true,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every slice untouched.
    pub fn identity() -> Self {
        AugmentConfig {
            max_shift_frac: 0.0,
            max_rotate_deg: 0.0,
            max_shear: 0.0,
            zoom_range: [1.0, 1.0],
            brightness_frac: 0.0,
            elastic_alpha: 0.0,
            elastic_sigma: 0.0,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.zoom_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "zoom range {:?} must satisfy 0 < lo <= hi",
                self.zoom_range
            )));
        }
        let magnitudes = [
            self.max_shift_frac,
            self.max_rotate_deg,
            self.max_shear,
            self.brightness_frac,
            self.elastic_alpha,
            self.elastic_sigma,
        ];
        if magnitudes.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidArgument(
                "augmentation magnitudes must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One concrete draw of the affine and intensity parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    /// Translation `(dy, dx)` in pixels.
    pub shift: [f64; 2],
    pub rotate_rad: f64,
    pub shear: f64,
    pub zoom: f64,
    pub brightness: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        shift: [0.0, 0.0],
        rotate_rad: 0.0,
        shear: 0.0,
        zoom: 1.0,
        brightness: 0.0,
    };

    /// Forward matrix in `(x, y)` coordinates: zoom · rotation · shear.
    fn matrix(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.rotate_rad.sin_cos();
        let z = self.zoom;
        // R · [[1, shear], [0, 1]]
        [
            [z * c, z * (c * self.shear - s)],
            [z * s, z * (s * self.shear + c)],
        ]
    }

    fn inverse(&self) -> [[f64; 2]; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ]
    }
}

fn symmetric<R: Rng>(rng: &mut R, m: f64) -> f64 {
    if m > 0.0 {
        rng.random_range(-m..=m)
    } else {
        0.0
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamped borders.
fn smooth(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = field.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            tmp[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * field[[y, clamp(x as isize + j as isize - r, w)]])
                .sum();
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[[clamp(y as isize + j as isize - r, h), x]])
                .sum();
        }
    }
    out
}

/// Displacement fields `(dy, dx)` for elastic distortion.
fn elastic_fields<R: Rng>(rng: &mut R, shape: (usize, usize), alpha: f64, sigma: f64) -> Option<[Array2<f64>; 2]> {
    if alpha <= 0.0 {
        return None;
    }
    let mut noise = || Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0..=1.0));
    let dy = noise();
    let dx = noise();
    Some([smooth(&dy, sigma) * alpha, smooth(&dx, sigma) * alpha])
}

fn bilinear(img: ArrayView2<'_, f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    if !(y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64) {
        return 0.0;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let v = |yy: usize, xx: usize| img[[yy, xx]] as f64;
    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
    let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

fn nearest(lab: ArrayView2<'_, u8>, y: f64, x: f64) -> u8 {
    let (h, w) = lab.dim();
    let (yr, xr) = (y.round(), x.round());
    if yr < 0.0 || xr < 0.0 || yr > (h - 1) as f64 || xr > (w - 1) as f64 {
        return 0;
    }
    lab[[yr as usize, xr as usize]]
}

/// Apply explicit parameters (and optional displacement fields).
pub fn apply_transform(
    image: ArrayView3<'_, f32>,
    label: ArrayView2<'_, u8>,
    params: &AffineParams,
    displacement: Option<&[Array2<f64>; 2]>,
) -> Result<(Array3<f32>, Array2<u8>)> {
    let (ch, h, w) = image.dim();
    if label.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "image slice {:?} vs label slice {:?}",
            (h, w),
            label.dim()
        )));
    }
    let inv = params.inverse();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out_img = Array3::<f32>::zeros((ch, h, w));
    let mut out_lab = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 - cx - params.shift[1];
            let py = y as f64 - cy - params.shift[0];
            let mut sx = inv[0][0] * px + inv[0][1] * py + cx;
            let mut sy = inv[1][0] * px + inv[1][1] * py + cy;
            if let Some([dy, dx]) = displacement {
                sy += dy[[y, x]];
                sx += dx[[y, x]];
            }
            for c in 0..ch {
                out_img[[c, y, x]] = bilinear(image.index_axis(ndarray::Axis(0), c), sy, sx);
            }
            out_lab[[y, x]] = nearest(label, sy, sx);
        }
    }
    if params.brightness != 0.0 {
        let b = params.brightness as f32;
        out_img.mapv_inplace(|v| v + b);
    }
    Ok((out_img, out_lab))
}

/// Draw parameters from `config` with `seed` and transform the slice pair.
pub fn augment_slice(
    image: ArrayView3<'_, f32>,
    label: ArrayView2<'_, u8>,
    config: &AugmentConfig,
    seed: u64,
) -> Result<(Array3<f32>, Array2<u8>)> {
    if !config.enabled {
        return Ok((image.to_owned(), label.to_owned()));
    }
    config.validate()?;
    let (_, h, w) = image.dim();
    let mut rng = seed::rng(seed);
    let [zlo, zhi] = config.zoom_range;
    let params = AffineParams {
        shift: [
            symmetric(&mut rng, config.max_shift_frac) * h as f64,
            symmetric(&mut rng, config.max_shift_frac) * w as f64,
        ],
        rotate_rad: symmetric(&mut rng, config.max_rotate_deg).to_radians(),
        shear: symmetric(&mut rng, config.max_shear),
        zoom: if zhi > zlo { rng.random_range(zlo..=zhi) } else { zlo },
        brightness: symmetric(&mut rng, config.brightness_frac),
    };
    let fields = elastic_fields(&mut rng, (h, w), config.elastic_alpha, config.elastic_sigma);
    apply_transform(image, label, &params, fields.as_ref())
}
