//! Dense row-major matrices and the numeric kernels shared by the graph and
//! the cache-based inference path.

use std::fmt;

/// A row-major `rows x cols` matrix of `f64`. Vectors are `n x 1` or `1 x n`,
/// scalars are `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stack row-blocks vertically. All parts must share `cols`.
    pub fn vstack(parts: &[&Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols);
        let rows = parts.iter().map(|t| t.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
        }
        Tensor { rows, cols, data }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Strided view of a row-major buffer: `(slice, row stride, column stride)`.
pub type View<'a> = (&'a [f64], isize, isize);

/// `c = beta * c + a @ b` over strided views through a blocked SIMD kernel.
/// `c` is written at `(rsc, csc)` strides from the start of `out`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(m: usize, k: usize, n: usize, a: View, b: View, beta: f64, out: &mut [f64], rsc: isize, csc: isize) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize
    };
    assert!(k == 0 || last(m, k, a.1, a.2) < a.0.len(), "gemm: a view out of bounds");
    assert!(k == 0 || last(k, n, b.1, b.2) < b.0.len(), "gemm: b view out of bounds");
    assert!(last(m, n, rsc, csc) < out.len(), "gemm: c view out of bounds");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            out.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn gemm_acc(m: usize, k: usize, n: usize, a: View, b: View, out: &mut [f64]) {
    gemm_strided(m, k, n, a, b, 1.0, out, n as isize, 1);
}

/// `out += a @ b` with `a: m x k`, `b: k x n`.
pub fn matmul_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    assert_eq!(a.cols, b.rows, "matmul inner dimension mismatch");
    assert_eq!(out.shape(), (a.rows, b.cols));
    let (m, k, n) = (a.rows, a.cols, b.cols);
    gemm_acc(m, k, n, (&a.data, k as isize, 1), (&b.data, n as isize, 1), &mut out.data);
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut out);
    out
}

/// `out += a @ b^T` with `a: m x k`, `b: n x k`.
pub fn matmul_nt_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension mismatch");
    assert_eq!(out.shape(), (a.rows, b.rows));
    let (m, k, n) = (a.rows, a.cols, b.rows);
    gemm_acc(m, k, n, (&a.data, k as isize, 1), (&b.data, 1, k as isize), &mut out.data);
}

pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.rows);
    matmul_nt_acc(a, b, &mut out);
    out
}

/// `out += a^T @ b` with `a: k x m`, `b: k x n`.
pub fn matmul_tn_acc(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension mismatch");
    assert_eq!(out.shape(), (a.cols, b.cols));
    let (m, k, n) = (a.cols, a.rows, b.cols);
    gemm_acc(m, k, n, (&a.data, 1, m as isize), (&b.data, n as isize, 1), &mut out.data);
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm. Returns `(output, normalized, rstd)`; the latter two
/// are kept by the graph for the backward pass.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> (Tensor, Tensor, Vec<f64>) {
    let n = x.cols;
    let mut out = Tensor::zeros(x.rows, n);
    let mut xhat = Tensor::zeros(x.rows, n);
    let mut rstds = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        rstds.push(rstd);
        let xh = xhat.row_mut(r);
        for c in 0..n {
            xh[c] = (row[c] - mean) * rstd;
        }
        let o = &mut out.data[r * n..(r + 1) * n];
        for c in 0..n {
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
    (out, xhat, rstds)
}

/// Numerically stable in-place softmax over a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `log(sum(exp(v)))`, stable.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
