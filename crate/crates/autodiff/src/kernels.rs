//! Strided matrix views and a bounds-checked GEMM over them.

use crate::scalar::Scalar;

/// Read-only strided view of an `rows×cols` matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Contiguous row-major matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Column block `[col0, col0+cols)` of rows `[row0, row0+rows)` of a
    /// row-major matrix with `width` columns.
    pub fn block(
        data: &'a [T],
        width: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Self {
        MatRef {
            data,
            offset: row0 * width + col0,
            rows,
            cols,
            rs: width,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// Mutable strided view.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(
        data: &'a mut [T],
        width: usize,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Self {
        MatMut {
            data,
            offset: row0 * width + col0,
            rows,
            cols,
            rs: width,
            cs: 1,
        }
    }
}

/// `c = alpha * a·b + beta * c`.
///
/// Panics if any view reaches outside its buffer or the inner dimensions
/// disagree; callers validate shapes before reaching this point.
pub fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.offset + i * c.rs + j * c.cs;
                c.data[idx] = if beta == T::zero() {
                    T::zero()
                } else {
                    beta * c.data[idx]
                };
            }
        }
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs out of bounds");
    let c_last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(c_last < c.data.len(), "gemm output out of bounds");
    // SAFETY: every view was bounds-checked above and `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense row-major product `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::dense(a, m, k),
        MatRef::dense(b, k, n),
        T::zero(),
        MatMut::dense(&mut out, m, n),
    );
    out
}
