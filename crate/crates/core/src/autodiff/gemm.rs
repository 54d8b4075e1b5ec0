//! Thin safe wrappers over `matrixmultiply::dgemm`.

/// Strided view of an `rows × cols` matrix inside a slice.
#[derive(Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Self { offset, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major `cols × rows` block.
    pub fn transposed(offset: usize, stored_cols: usize) -> Self {
        Self { offset, rs: 1, cs: stored_cols as isize }
    }

    pub fn strided(offset: usize, rs: usize, cs: usize) -> Self {
        Self { offset, rs: rs as isize, cs: cs as isize }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize
    }
}

/// `c = alpha · a · b + beta · c` with `a: m×k`, `b: k×n`, `c: m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(av.last_index(m, k) < a.len() || k == 0, "gemm: a out of bounds");
    assert!(bv.last_index(k, n) < b.len() || k == 0, "gemm: b out of bounds");
    assert!(cv.last_index(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: the bounds of all three strided views were checked above, and
    // `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs,
            av.cs,
            b.as_ptr().add(bv.offset),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs,
            cv.cs,
        );
    }
}

/// Row-major `c (+)= op(a) · op(b)` for contiguous matrices.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let av = if a_t { View::transposed(0, m) } else { View::row_major(0, k) };
    let bv = if b_t { View::transposed(0, k) } else { View::row_major(0, n) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    gemm(m, k, n, 1.0, a, av, b, bv, beta, c, View::row_major(0, n));
}
