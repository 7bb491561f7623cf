//! Raw numeric kernels shared by the eager tensor API and the autodiff graph.
//!
//! Both paths call exactly these functions, so a value computed through the
//! graph is bit-identical to the same value computed eagerly.

use super::Float;

/// Strided read-only matrix view. `rows`/`cols` are implied by the caller.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [Float],
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [Float], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `? × cols` matrix.
    pub fn transposed(data: &'a [Float], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rs: 1,
            cs: cols as isize,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset as isize
            + (rows as isize - 1) * self.rs
            + (cols as isize - 1) * self.cs;
        assert!(
            last >= 0 && (last as usize) < self.data.len(),
            "strided view out of bounds"
        );
    }
}

/// `C ← alpha·A·B + beta·C` with `A: n×k`, `B: k×m`, and `C` row-major
/// with row stride `c_rs` (columns contiguous).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    n: usize,
    k: usize,
    m: usize,
    alpha: Float,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: Float,
    c: &mut [Float],
    c_rs: usize,
) {
    gemm_at(n, k, m, alpha, a, b, beta, c, 0, c_rs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_at(
    n: usize,
    k: usize,
    m: usize,
    alpha: Float,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: Float,
    c: &mut [Float],
    c_offset: usize,
    c_rs: usize,
) {
    if n == 0 || m == 0 {
        return;
    }
    a.check(n, k);
    b.check(k, m);
    assert!(c_offset + (n - 1) * c_rs + m <= c.len(), "output view out of bounds");
    // SAFETY: every pointer access of the kernel stays within the extents
    // verified by the bounds checks above, and `c` is exclusively borrowed.
    unsafe {
        gemm_raw(
            n,
            k,
            m,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr().add(c_offset),
            c_rs as isize,
            1,
        );
    }
}

#[cfg(not(feature = "f32"))]
use matrixmultiply::dgemm as gemm_raw;
#[cfg(feature = "f32")]
use matrixmultiply::sgemm as gemm_raw;

/// Row-wise numerically stable softmax, in place.
pub(crate) fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `log Σ exp(row)`, stabilised by the row maximum.
pub(crate) fn log_sum_exp(row: &[Float]) -> Float {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let sum: Float = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub(crate) fn sigmoid(x: Float) -> Float {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn silu(x: Float) -> Float {
    x * sigmoid(x)
}

/// Inverse root-mean-square of a row: `1 / sqrt(mean(x²) + eps)`.
pub(crate) fn inv_rms(row: &[Float], eps: Float) -> Float {
    let ms = row.iter().map(|x| x * x).sum::<Float>() / row.len() as Float;
    1.0 / (ms + eps).sqrt()
}
