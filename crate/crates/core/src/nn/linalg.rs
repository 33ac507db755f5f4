//! Strided matrix views over flat buffers and a checked GEMM entry point.

use super::Real;

#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatRef<'a, T> {
    /// Dense row-major `rows × cols` view starting at element 0.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a [T],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        let view = Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(
            view.extent() <= data.len(),
            "matrix view out of bounds: needs {} elements, buffer has {}",
            view.extent(),
            data.len()
        );
        view
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
    }
}

#[derive(Debug)]
pub struct MatMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> MatMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, 0, rows, cols, cols, 1)
    }

    pub fn strided(
        data: &'a mut [T],
        offset: usize,
        rows: usize,
        cols: usize,
        rs: usize,
        cs: usize,
    ) -> Self {
        if rows > 0 && cols > 0 {
            let extent = offset + (rows - 1) * rs + (cols - 1) * cs + 1;
            assert!(
                extent <= data.len(),
                "mutable matrix view out of bounds: needs {extent}, buffer has {}",
                data.len()
            );
        }
        Self {
            data,
            offset,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c ← alpha·a·b + beta·c`. When `beta` is zero, `c` is overwritten without being read.
pub fn gemm<T: Real>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: MatMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm row mismatch");
    assert_eq!(b.cols, c.cols, "gemm column mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        // matrixmultiply handles k == 0 by scaling c, but keep the contract explicit.
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
    // SAFETY: all three views were bounds-checked at construction and strides are
    // non-negative, so every addressed element lies inside its buffer.
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
