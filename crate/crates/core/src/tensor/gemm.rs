//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// A strided read-only view of an `m x k` (or `k x n`) matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], ncols: usize) -> Self {
        Self {
            data,
            row_stride: ncols as isize,
            col_stride: 1,
        }
    }

    /// View of the transpose of a row-major matrix with `ncols` columns.
    pub fn transposed(data: &'a [f64], ncols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: ncols as isize,
        }
    }

    pub fn with_transpose(data: &'a [f64], ncols: usize, transpose: bool) -> Self {
        if transpose {
            Self::transposed(data, ncols)
        } else {
            Self::row_major(data, ncols)
        }
    }

    fn max_offset(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * self.row_stride as usize + (cols - 1) * self.col_stride as usize
    }
}

/// `c = alpha * a * b + beta * c` where `a` is `m x k`, `b` is `k x n` and
/// `c` is a row-major `m x n` buffer with row stride `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_offset(m, k) < a.data.len().max(1), "gemm: lhs out of bounds");
    assert!(b.max_offset(k, n) < b.data.len().max(1), "gemm: rhs out of bounds");
    assert!((m - 1) * ldc + n <= c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
