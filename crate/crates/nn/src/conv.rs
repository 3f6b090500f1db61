//! Convolution and transposed convolution via im2col and GEMM.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::{gemm, Tensor};

/// Kernel, stride and zero padding per spatial axis `(D, H, W)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Output extent of a convolution over `input`.
    pub fn conv_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if padded < self.kernel[a] {
                return Err(NnError::Shape(format!(
                    "input extent {} (padding {}) smaller than kernel {} on axis {a}",
                    input[a], self.pad[a], self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extent of a transposed convolution over `input`.
    pub fn transpose_out(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a];
            if full <= 2 * self.pad[a] {
                return Err(NnError::Shape(format!("transposed conv collapses axis {a}")));
            }
            out[a] = full - 2 * self.pad[a];
        }
        Ok(out)
    }
}

/// Unfold `x` (`channels × image`) into `(channels·K) × positions` columns.
pub(crate) fn im2col(x: &[f64], channels: usize, image: [usize; 3], g: &ConvGeom, grid: [usize; 3]) -> Vec<f64> {
    let k = g.kernel;
    let p = grid[0] * grid[1] * grid[2];
    let iv = image[0] * image[1] * image[2];
    let mut col = vec![0.0; channels * g.kernel_volume() * p];
    let mut row = 0;
    for c in 0..channels {
        let xc = &x[c * iv..(c + 1) * iv];
        for kd in 0..k[0] {
            for kh in 0..k[1] {
                for kw in 0..k[2] {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for od in 0..grid[0] {
                        let id = (od * g.stride[0] + kd) as isize - g.pad[0] as isize;
                        if id < 0 || id >= image[0] as isize {
                            continue;
                        }
                        for oh in 0..grid[1] {
                            let ih = (oh * g.stride[1] + kh) as isize - g.pad[1] as isize;
                            if ih < 0 || ih >= image[1] as isize {
                                continue;
                            }
                            let src = (id as usize * image[1] + ih as usize) * image[2];
                            let base = (od * grid[1] + oh) * grid[2];
                            for ow in 0..grid[2] {
                                let iw = (ow * g.stride[2] + kw) as isize - g.pad[2] as isize;
                                if iw >= 0 && iw < image[2] as isize {
                                    dst[base + ow] = xc[src + iw as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add columns back onto `out`.
pub(crate) fn col2im(col: &[f64], channels: usize, image: [usize; 3], g: &ConvGeom, grid: [usize; 3], out: &mut [f64]) {
    let k = g.kernel;
    let p = grid[0] * grid[1] * grid[2];
    let iv = image[0] * image[1] * image[2];
    let mut row = 0;
    for c in 0..channels {
        let oc = &mut out[c * iv..(c + 1) * iv];
        for kd in 0..k[0] {
            for kh in 0..k[1] {
                for kw in 0..k[2] {
                    let src = &col[row * p..(row + 1) * p];
                    for od in 0..grid[0] {
                        let id = (od * g.stride[0] + kd) as isize - g.pad[0] as isize;
                        if id < 0 || id >= image[0] as isize {
                            continue;
                        }
                        for oh in 0..grid[1] {
                            let ih = (oh * g.stride[1] + kh) as isize - g.pad[1] as isize;
                            if ih < 0 || ih >= image[1] as isize {
                                continue;
                            }
                            let dst = (id as usize * image[1] + ih as usize) * image[2];
                            let base = (od * grid[1] + oh) * grid[2];
                            for ow in 0..grid[2] {
                                let iw = (ow * g.stride[2] + kw) as isize - g.pad[2] as isize;
                                if iw >= 0 && iw < image[2] as isize {
                                    oc[dst + iw as usize] += src[base + ow];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], positions: usize) {
    for (o, b) in bias.iter().enumerate() {
        for v in &mut out[o * positions..(o + 1) * positions] {
            *v += b;
        }
    }
}

fn bias_grad(grad_out: &[f64], channels: usize, positions: usize, gb: &mut [f64]) {
    for o in 0..channels {
        gb[o] += grad_out[o * positions..(o + 1) * positions].iter().sum::<f64>();
    }
}

/// Weight layout `(out, in, kd, kh, kw)`.
pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: Option<&[f64]>, out_ch: usize, g: &ConvGeom) -> Result<Tensor> {
    let [n, cin, ..] = x.shape();
    let grid = g.conv_out(x.spatial())?;
    let ck = cin * g.kernel_volume();
    debug_assert_eq!(weight.len(), out_ch * ck);
    let p = grid.iter().product::<usize>();
    let mut out = Tensor::zeros([n, out_ch, grid[0], grid[1], grid[2]]);
    for b in 0..n {
        let dst = out.item_mut(b);
        if g.pointwise() {
            gemm(out_ch, ck, p, weight, false, x.item(b), false, 0.0, dst);
        } else {
            let col = im2col(x.item(b), cin, x.spatial(), g, grid);
            gemm(out_ch, ck, p, weight, false, &col, false, 0.0, dst);
        }
        if let Some(bias) = bias {
            add_bias(dst, bias, p);
        }
    }
    Ok(out)
}

/// Returns the input gradient and accumulates weight and bias gradients.
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    g: &ConvGeom,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) -> Tensor {
    let [n, cin, ..] = x.shape();
    let out_ch = grad_out.channels();
    let grid = grad_out.spatial();
    let ck = cin * g.kernel_volume();
    let p = grid.iter().product::<usize>();
    let mut gx = Tensor::zeros(x.shape());
    for b in 0..n {
        let go = grad_out.item(b);
        if g.pointwise() {
            gemm(out_ch, p, ck, go, false, x.item(b), true, 1.0, gw);
            gemm(ck, out_ch, p, weight, true, go, false, 0.0, gx.item_mut(b));
        } else {
            let col = im2col(x.item(b), cin, x.spatial(), g, grid);
            gemm(out_ch, p, ck, go, false, &col, true, 1.0, gw);
            let mut gcol = vec![0.0; ck * p];
            gemm(ck, out_ch, p, weight, true, go, false, 0.0, &mut gcol);
            col2im(&gcol, cin, x.spatial(), g, grid, gx.item_mut(b));
        }
    }
    if let Some(gb) = gb {
        for b in 0..n {
            bias_grad(grad_out.item(b), out_ch, p, gb);
        }
    }
    gx
}

/// Weight layout `(in, out, kd, kh, kw)`.
pub(crate) fn conv_transpose_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    out_ch: usize,
    g: &ConvGeom,
) -> Result<Tensor> {
    let [n, cin, ..] = x.shape();
    let grid = x.spatial();
    let image = g.transpose_out(grid)?;
    let ck = out_ch * g.kernel_volume();
    debug_assert_eq!(weight.len(), cin * ck);
    let p = grid.iter().product::<usize>();
    let q = image.iter().product::<usize>();
    let mut out = Tensor::zeros([n, out_ch, image[0], image[1], image[2]]);
    let mut col = vec![0.0; ck * p];
    for b in 0..n {
        gemm(ck, cin, p, weight, true, x.item(b), false, 0.0, &mut col);
        let dst = out.item_mut(b);
        col2im(&col, out_ch, image, g, grid, dst);
        if let Some(bias) = bias {
            add_bias(dst, bias, q);
        }
    }
    Ok(out)
}

pub(crate) fn conv_transpose_backward(
    x: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    g: &ConvGeom,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) -> Tensor {
    let [n, cin, ..] = x.shape();
    let out_ch = grad_out.channels();
    let grid = x.spatial();
    let image = grad_out.spatial();
    let ck = out_ch * g.kernel_volume();
    let p = grid.iter().product::<usize>();
    let q = image.iter().product::<usize>();
    let mut gx = Tensor::zeros(x.shape());
    for b in 0..n {
        let gcol = im2col(grad_out.item(b), out_ch, image, g, grid);
        gemm(cin, ck, p, weight, false, &gcol, false, 0.0, gx.item_mut(b));
        gemm(cin, p, ck, x.item(b), false, &gcol, true, 1.0, gw);
    }
    if let Some(gb) = gb {
        for b in 0..n {
            bias_grad(grad_out.item(b), out_ch, q, gb);
        }
    }
    gx
}
