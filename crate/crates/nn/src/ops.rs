//! Element-wise, normalisation and resampling kernels with their adjoints.

use crate::tensor::Tensor;

/// Sparse linear map along one axis: output `o` is `Σ w · input[i]` over `taps[o]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AxisMap {
    in_len: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    fn out_len(&self) -> usize {
        self.taps.len()
    }

    /// Average over `[start, end)` windows.
    fn windows(in_len: usize, bounds: impl Iterator<Item = (usize, usize)>) -> Self {
        let taps = bounds
            .map(|(s, e)| {
                let w = 1.0 / (e - s) as f64;
                (s..e).map(|i| (i, w)).collect()
            })
            .collect();
        AxisMap { in_len, taps }
    }

    /// Non-overlapping windows of `factor`; the last may be partial.
    pub fn avg_pool(in_len: usize, factor: usize) -> Self {
        let out = in_len.div_ceil(factor);
        Self::windows(in_len, (0..out).map(|o| (o * factor, ((o + 1) * factor).min(in_len))))
    }

    /// Adaptive average pooling to `out` bins.
    pub fn adaptive(in_len: usize, out: usize) -> Self {
        Self::windows(
            in_len,
            (0..out).map(|o| ((o * in_len) / out, ((o + 1) * in_len).div_ceil(out))),
        )
    }

    /// Linear interpolation with half-pixel centres, clamped at the borders.
    pub fn linear(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let taps = (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_len - 1);
                let w = s - i0 as f64;
                if i1 == i0 || w == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - w), (i1, w)]
                }
            })
            .collect();
        AxisMap { in_len, taps }
    }

    fn apply(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let (li, lo) = (self.in_len, self.out_len());
        let mut y = vec![0.0; outer * lo * inner];
        for a in 0..outer {
            let xs = &x[a * li * inner..(a + 1) * li * inner];
            let ys = &mut y[a * lo * inner..(a + 1) * lo * inner];
            for (o, taps) in self.taps.iter().enumerate() {
                let dst = &mut ys[o * inner..(o + 1) * inner];
                for &(i, w) in taps {
                    for (d, s) in dst.iter_mut().zip(&xs[i * inner..(i + 1) * inner]) {
                        *d += w * s;
                    }
                }
            }
        }
        y
    }

    fn apply_adjoint(&self, gy: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let (li, lo) = (self.in_len, self.out_len());
        let mut gx = vec![0.0; outer * li * inner];
        for a in 0..outer {
            let gys = &gy[a * lo * inner..(a + 1) * lo * inner];
            let gxs = &mut gx[a * li * inner..(a + 1) * li * inner];
            for (o, taps) in self.taps.iter().enumerate() {
                let src = &gys[o * inner..(o + 1) * inner];
                for &(i, w) in taps {
                    for (d, s) in gxs[i * inner..(i + 1) * inner].iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        gx
    }
}

/// Separable linear map over the three spatial axes.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SpatialMap {
    pub axes: [AxisMap; 3],
}

impl SpatialMap {
    pub fn out_dims(&self) -> [usize; 3] {
        [self.axes[0].out_len(), self.axes[1].out_len(), self.axes[2].out_len()]
    }

    fn in_dims(&self) -> [usize; 3] {
        [self.axes[0].in_len, self.axes[1].in_len, self.axes[2].in_len]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let [n, c, ..] = x.shape();
        let mut dims = self.in_dims();
        let mut cur = x.data().to_vec();
        for a in 0..3 {
            let outer = n * c * dims[..a].iter().product::<usize>();
            let inner = dims[a + 1..].iter().product::<usize>();
            cur = self.axes[a].apply(&cur, outer, inner);
            dims[a] = self.axes[a].out_len();
        }
        Tensor::from_vec([n, c, dims[0], dims[1], dims[2]], cur).expect("resampled length")
    }

    pub fn backward(&self, gy: &Tensor) -> Tensor {
        let [n, c, ..] = gy.shape();
        let mut dims = self.out_dims();
        let mut cur = gy.data().to_vec();
        for a in (0..3).rev() {
            let outer = n * c * dims[..a].iter().product::<usize>();
            let inner = dims[a + 1..].iter().product::<usize>();
            cur = self.axes[a].apply_adjoint(&cur, outer, inner);
            dims[a] = self.axes[a].in_len;
        }
        Tensor::from_vec([n, c, dims[0], dims[1], dims[2]], cur).expect("resampled length")
    }
}

pub(crate) fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub(crate) fn relu_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(y.data()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// Softmax over the channel axis at every voxel.
pub(crate) fn softmax(x: &Tensor) -> Tensor {
    let [n, c, ..] = x.shape();
    let v = x.voxels();
    let mut y = x.clone();
    for b in 0..n {
        let item = y.item_mut(b);
        for i in 0..v {
            let mut m = f64::NEG_INFINITY;
            for k in 0..c {
                m = m.max(item[k * v + i]);
            }
            let mut s = 0.0;
            for k in 0..c {
                let e = (item[k * v + i] - m).exp();
                item[k * v + i] = e;
                s += e;
            }
            for k in 0..c {
                item[k * v + i] /= s;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    let [n, c, ..] = y.shape();
    let v = y.voxels();
    let mut gx = Tensor::zeros(y.shape());
    for b in 0..n {
        let (ys, gs) = (y.item(b), gy.item(b));
        let out = gx.item_mut(b);
        for i in 0..v {
            let dot: f64 = (0..c).map(|k| ys[k * v + i] * gs[k * v + i]).sum();
            for k in 0..c {
                out[k * v + i] = ys[k * v + i] * (gs[k * v + i] - dot);
            }
        }
    }
    gx
}

/// Per-channel statistics saved by a training-mode batch norm.
#[derive(Debug, Clone)]
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Unbiased variance for the running estimate.
    pub var_unbiased: Vec<f64>,
}

pub(crate) fn batch_stats(x: &Tensor, eps: f64) -> BnStats {
    let [n, c, ..] = x.shape();
    let m = (n * x.voxels()) as f64;
    let mut mean = vec![0.0; c];
    let mut inv_std = vec![0.0; c];
    let mut var_unbiased = vec![0.0; c];
    for k in 0..c {
        let s: f64 = (0..n).map(|b| x.plane(b, k).iter().sum::<f64>()).sum();
        let mu = s / m;
        let ss: f64 = (0..n)
            .map(|b| x.plane(b, k).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
            .sum();
        let var = ss / m;
        mean[k] = mu;
        inv_std[k] = 1.0 / (var + eps).sqrt();
        var_unbiased[k] = if m > 1.0 { ss / (m - 1.0) } else { var };
    }
    BnStats {
        mean,
        inv_std,
        var_unbiased,
    }
}

pub(crate) fn bn_apply(x: &Tensor, mean: &[f64], inv_std: &[f64], gamma: &[f64], beta: &[f64]) -> Tensor {
    let [n, c, ..] = x.shape();
    let mut y = x.clone();
    for b in 0..n {
        for k in 0..c {
            let (mu, is, g, bt) = (mean[k], inv_std[k], gamma[k], beta[k]);
            y.plane_mut(b, k).iter_mut().for_each(|v| *v = g * (*v - mu) * is + bt);
        }
    }
    y
}

/// Training-mode adjoint; accumulates `gamma`/`beta` gradients.
pub(crate) fn bn_backward_train(
    x: &Tensor,
    gy: &Tensor,
    stats: &BnStats,
    gamma: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) -> Tensor {
    let [n, c, ..] = x.shape();
    let m = (n * x.voxels()) as f64;
    let mut gx = Tensor::zeros(x.shape());
    for k in 0..c {
        let (mu, is) = (stats.mean[k], stats.inv_std[k]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            for (&v, &g) in x.plane(b, k).iter().zip(gy.plane(b, k)) {
                sum_g += g;
                sum_gx += g * (v - mu) * is;
            }
        }
        ggamma[k] += sum_gx;
        gbeta[k] += sum_g;
        let scale = gamma[k] * is / m;
        for b in 0..n {
            let xs = x.plane(b, k).to_vec();
            let gs = gy.plane(b, k).to_vec();
            for ((o, v), g) in gx.plane_mut(b, k).iter_mut().zip(xs).zip(gs) {
                let xhat = (v - mu) * is;
                *o = scale * (m * g - sum_g - xhat * sum_gx);
            }
        }
    }
    gx
}

/// Evaluation-mode adjoint (fixed statistics).
pub(crate) fn bn_backward_eval(
    x: &Tensor,
    gy: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) -> Tensor {
    let [n, c, ..] = x.shape();
    let mut gx = gy.clone();
    for b in 0..n {
        for k in 0..c {
            let xs = x.plane(b, k).to_vec();
            for (g, v) in gx.plane_mut(b, k).iter_mut().zip(xs) {
                ggamma[k] += *g * (v - mean[k]) * inv_std[k];
                gbeta[k] += *g;
                *g *= gamma[k] * inv_std[k];
            }
        }
    }
    gx
}
