//! Thin safe wrappers over `matrixmultiply` plus a small dense solver.

/// `c = op(a) * op(b) (+ c if accumulate)` for row-major matrices.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`. When `a_t` is set,
/// `a` is stored as `k x m`; likewise `b_t` means `b` is stored as `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A read-only strided matrix view: element `(i, j)` is `data[i * row + j * col]`.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub data: &'a [f64],
    pub row: usize,
    pub col: usize,
}

fn last_index(rows: usize, cols: usize, row: usize, col: usize) -> usize {
    (rows - 1) * row + (cols - 1) * col
}

/// `c = a * b (+ c if accumulate)` on strided views; `c` has row stride `ldc`
/// and unit column stride.
pub fn gemm_view(m: usize, k: usize, n: usize, a: View, b: View, c: &mut [f64], ldc: usize, accumulate: bool) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                c[r * ldc..r * ldc + n].fill(0.0);
            }
        }
        return;
    }
    assert!(last_index(m, k, a.row, a.col) < a.data.len());
    assert!(last_index(k, n, b.row, b.col) < b.data.len());
    assert!(last_index(m, n, ldc, 1) < c.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the largest offset touched in every operand is asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row as isize,
            a.col as isize,
            b.data.as_ptr(),
            b.row as isize,
            b.col as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    dim: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors `mat + ridge * I`. Returns `None` when that is not numerically
    /// positive definite.
    pub fn factor(mat: &[f64], dim: usize, ridge: f64) -> Option<Self> {
        let mut l = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = mat[i * dim + j];
                if i == j {
                    s += ridge;
                }
                for p in 0..j {
                    s -= l[i * dim + p] * l[j * dim + p];
                }
                if i == j {
                    if !(s > 0.0) {
                        return None;
                    }
                    l[i * dim + i] = s.sqrt();
                } else {
                    l[i * dim + j] = s / l[j * dim + j];
                }
            }
        }
        Some(Self { dim, l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (dim, l) = (self.dim, &self.l);
        let mut z = vec![0.0; dim];
        for i in 0..dim {
            let mut s = rhs[i];
            for p in 0..i {
                s -= l[i * dim + p] * z[p];
            }
            z[i] = s / l[i * dim + i];
        }
        let mut x = vec![0.0; dim];
        for i in (0..dim).rev() {
            let mut s = z[i];
            for p in i + 1..dim {
                s -= l[p * dim + i] * x[p];
            }
            x[i] = s / l[i * dim + i];
        }
        x
    }
}

/// Solves `(mat + ridge I) x = rhs` by Cholesky; `None` if not positive definite.
pub fn cholesky_solve(mat: &[f64], dim: usize, rhs: &[f64], ridge: f64) -> Option<Vec<f64>> {
    Cholesky::factor(mat, dim, ridge).map(|c| c.solve(rhs))
}
