//! Strided matrix products backed by `matrixmultiply`.

use super::flops;

/// Logical matrix view: `rows × cols`, optionally stored transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    /// `data` is stored row-major as `stored_rows × stored_cols`; the view is
    /// its transpose when `transposed` is set.
    pub fn new(data: &'a [T], stored_rows: usize, stored_cols: usize, transposed: bool) -> Self {
        debug_assert_eq!(data.len(), stored_rows * stored_cols);
        if transposed {
            Self {
                data,
                rows: stored_cols,
                cols: stored_rows,
                transposed,
            }
        } else {
            Self {
                data,
                rows: stored_rows,
                cols: stored_cols,
                transposed,
            }
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a · b` with `out` row-major `a.rows × b.cols`.
pub(crate) fn dgemm(a: MatRef<'_, f64>, b: MatRef<'_, f64>, beta: f64, out: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    flops::record((m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `out` is a distinct exclusive borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Single-precision variant used by the benchmark kernels.
pub(crate) fn sgemm(a: MatRef<'_, f32>, b: MatRef<'_, f32>, beta: f32, out: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size");
    flops::record((m * k * n) as u64);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: see `dgemm`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views_match_naive_product() {
        // a: 2×3, b: 3×2 stored transposed as 2×3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut out = [0.0; 4];
        dgemm(
            MatRef::new(&a, 2, 3, false),
            MatRef::new(&bt, 2, 3, true),
            0.0,
            &mut out,
        );
        // row0·bt_row0 = 1-3 = -2 ; row0·bt_row1 = 2+2+1.5 = 5.5
        assert_eq!(out, [-2.0, 5.5, -2.0, 16.0]);
    }
}
