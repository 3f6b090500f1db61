use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};

/// Dense `(N, C, D, H, W)` array of `f64`. 2D data uses `D = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(NnError::Shape(format!(
                "{} values cannot fill shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: [usize; 5], mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for d in 0..shape[2] {
                    for h in 0..shape[3] {
                        for w in 0..shape[4] {
                            data.push(f([n, c, d, h, w]));
                        }
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset(&self, i: [usize; 5]) -> usize {
        let s = self.shape;
        (((i[0] * s[1] + i[1]) * s[2] + i[2]) * s[3] + i[3]) * s[4] + i[4]
    }

    pub fn get(&self, i: [usize; 5]) -> f64 {
        self.data[self.offset(i)]
    }

    pub fn set(&mut self, i: [usize; 5], v: f64) {
        let o = self.offset(i);
        self.data[o] = v;
    }

    /// Contiguous `(C, D, H, W)` block of batch item `n`.
    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.len() / self.shape[0].max(1);
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.len() / self.shape[0].max(1);
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Contiguous voxels of channel `c` of batch item `n`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let v = self.voxels();
        let o = (n * self.shape[1] + c) * v;
        &self.data[o..o + v]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let v = self.voxels();
        let o = (n * self.shape[1] + c) * v;
        &mut self.data[o..o + v]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C (m×n) = alpha · op(A) · op(B) + beta · C` on row-major slices, where
/// `op(X)` is `X` or `Xᵀ` and `a`/`b` hold the untransposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the declared dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
