//! Safe wrappers around `matrixmultiply::dgemm` for row-major buffers.

/// Read-only strided matrix view: element (i, j) lives at `off + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `[rows, cols]` buffer, optionally viewed transposed.
    pub fn dense(data: &'a [f64], cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                data,
                off: 0,
                rs: 1,
                cs: cols,
            }
        } else {
            Self {
                data,
                off: 0,
                rs: cols,
                cs: 1,
            }
        }
    }

    /// Column block `[col0, col0 + width)` of rows `[row0, ..)` of a row-major buffer
    /// with row stride `stride`.
    pub fn block(data: &'a [f64], stride: usize, row0: usize, col0: usize) -> Self {
        Self {
            data,
            off: row0 * stride + col0,
            rs: stride,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm operand out of bounds");
    }
}

#[derive(Debug)]
pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn dense(data: &'a mut [f64], cols: usize) -> Self {
        Self {
            data,
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(data: &'a mut [f64], stride: usize, row0: usize, col0: usize) -> Self {
        Self {
            data,
            off: row0 * stride + col0,
            rs: stride,
            cs: 1,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "gemm output out of bounds");
    }
}

/// `C = alpha * A B + beta * C` with `A: [m, k]`, `B: [k, n]`, `C: [m, n]`.
pub fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: MatRef, b: MatRef, beta: f64, c: MatMut) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    c.check(m, n);
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = c.off + i * c.rs + j * c.cs;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the checks above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Dense row-major product `op(A) op(B)` written into a fresh buffer.
pub fn matmul_dense(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let a_cols = if a_t { m } else { k };
    let b_cols = if b_t { k } else { n };
    gemm(
        m,
        k,
        n,
        1.0,
        MatRef::dense(a, a_cols, a_t),
        MatRef::dense(b, b_cols, b_t),
        0.0,
        MatMut::dense(&mut out, n),
    );
    out
}
