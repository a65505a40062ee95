//! Thin safe wrappers over `matrixmultiply::sgemm`.

/// A matrix view: row-major storage with explicit strides, so transposes
/// are free.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = a·b + beta·c` with `c` contiguous row-major `[a.rows, b.cols]`.
pub(crate) fn gemm(a: View<'_>, b: View<'_>, c: &mut [f32], beta: f32) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: every index reachable through the strides was bounds-checked
    // above and `c` has exactly m*n contiguous elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_views() {
        // a = [[1,2,3],[4,5,6]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = vec![0.0; 4];
        gemm(View::new(&a, 2, 3), View::new(&a, 2, 3).t(), &mut c, 0.0);
        assert_eq!(c, vec![14.0, 32.0, 32.0, 77.0]);
        let mut d = vec![0.0; 9];
        gemm(View::new(&a, 2, 3).t(), View::new(&a, 2, 3), &mut d, 0.0);
        assert_eq!(d, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
