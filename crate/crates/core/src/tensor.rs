//! Dense row-major `f64` tensors and the few numeric kernels shared by the
//! autodiff ops (GEMM, bilinear sampling).

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panicking constructor for internal use where the length is known.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => shape_err(format!("expected rank-3 C×H×W, got {:?}", self.shape)),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub(crate) fn reshaped(&self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel `c` of a rank-3 tensor as a flat `H*W` slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// `op(a) · op(b)` for row-major matrices. `a` is stored `a_rows × a_cols`
/// and transposed when `ta`; likewise `b`. Returns the `m × n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if tb { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    let mut c = vec![0.0; m * n];
    gemm_into(a, a_rows, a_cols, ta, b, b_rows, b_cols, tb, &mut c, 0.0);
    c
}

/// `c = op(a) · op(b) + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    ta: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (m, k) = if ta { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let n = if tb { b_rows } else { b_cols };
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a_cols as isize) } else { (a_cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b_cols as isize) } else { (b_cols as isize, 1) };
    // SAFETY: strides describe in-bounds row-major layouts of the given slices.
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

/// One bilinear tap: flat index into an `H×W` plane and its weight.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub idx: usize,
    pub w: f64,
}

/// Bilinear interpolation taps at fractional `(y, x)` with zero padding:
/// corners outside the plane contribute nothing. Also returns the partial
/// derivatives of the interpolation weights w.r.t. `y` and `x` per tap.
pub(crate) fn bilinear_taps(h: usize, w: usize, y: f64, x: f64) -> [(Tap, f64, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let ly = y - y0;
    let lx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    let mut out = [(Tap { idx: 0, w: 0.0 }, 0.0, 0.0); 4];
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx), -(1.0 - lx), -(1.0 - ly)),
        (y0, x0 + 1, (1.0 - ly) * lx, -lx, 1.0 - ly),
        (y0 + 1, x0, ly * (1.0 - lx), 1.0 - lx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    for (slot, &(cy, cx, wt, dy, dx)) in out.iter_mut().zip(corners.iter()) {
        if cy >= 0 && cx >= 0 && (cy as usize) < h && (cx as usize) < w {
            *slot = (
                Tap {
                    idx: cy as usize * w + cx as usize,
                    w: wt,
                },
                dy,
                dx,
            );
        }
    }
    out
}

pub(crate) fn bilinear_zero(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    bilinear_taps(h, w, y, x)
        .iter()
        .map(|(t, _, _)| t.w * plane[t.idx])
        .sum()
}

/// 1-D linear interpolation stencil with edge clamping: `(i0, i1, frac)`.
pub(crate) fn clamped_stencil(n: usize, pos: f64) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let p = pos.clamp(0.0, max);
    let i0 = p.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, p - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let c = gemm(&a, 2, 3, false, &b, 3, 4, false);
        for i in 0..2 {
            for j in 0..4 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a[i * 3 + k] * b[k * 4 + j];
                }
                assert!((c[i * 4 + j] - s).abs() < 1e-12);
            }
        }
        // aᵀ stored as 3x2
        let at: Vec<f64> = (0..3)
            .flat_map(|k| (0..2).map(move |i| (i * 3 + k) as f64))
            .collect();
        let c2 = gemm(&at, 3, 2, true, &b, 3, 4, false);
        assert_eq!(c, c2);
    }

    #[test]
    fn bilinear_midpoint_and_zero_padding() {
        let plane = vec![0.0, 1.0, 2.0, 3.0]; // 2x2
        assert!((bilinear_zero(&plane, 2, 2, 0.0, 0.5) - 0.5).abs() < 1e-12);
        assert!((bilinear_zero(&plane, 2, 2, 0.5, 0.5) - 1.5).abs() < 1e-12);
        // half outside on the left: only the in-bounds corner counts
        assert!((bilinear_zero(&plane, 2, 2, 0.0, -0.5) - 0.0).abs() < 1e-12);
        assert_eq!(bilinear_zero(&plane, 2, 2, 5.0, 5.0), 0.0);
    }

    #[test]
    fn reshape_rejects_wrong_size() {
        let t = Tensor::zeros(&[2, 3]);
        assert!(t.clone().reshape(&[3, 2]).is_ok());
        assert!(t.reshape(&[4]).is_err());
    }
}
