use super::Real;

/// Strided matrix view into a flat buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Row-major `rows × cols` starting at 0.
    pub fn rows(cols: usize) -> Self {
        Layout { off: 0, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout { off: 0, rs: 1, cs: cols }
    }

    pub fn strided(off: usize, rs: usize, cs: usize) -> Self {
        Layout { off, rs, cs }
    }

    fn check(&self, rows: usize, cols: usize, len: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "gemm view out of bounds: {last} >= {len}");
    }
}

/// `C[m×n] = A[m×k]·B[k×n] + beta·C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    beta: F,
    c: &mut [F],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    la.check(m, k, a.len());
    lb.check(k, n, b.len());
    lc.check(m, n, c.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[lc.off + i * lc.rs + j * lc.cs];
                *v = if beta == F::zero() { F::zero() } else { *v * beta };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above and `c` is uniquely borrowed.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(la.off),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.off),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.off),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
