//! Dense row-major f32 matrices and a thin GEMM wrapper.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Operand view for [`gemm`]: a row-major matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct Op<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> Op<'a> {
    pub fn n(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            trans: false,
        }
    }

    pub fn t(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            trans: true,
        }
    }

    fn dims(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c`.
pub(crate) fn gemm(a: Op<'_>, b: Op<'_>, beta: f32, c: &mut Matrix) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: shapes and strides are validated above and describe
    // in-bounds row-major layouts of the backing slices.
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
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul(a: Op<'_>, b: Op<'_>) -> Matrix {
    let (m, _) = a.dims();
    let (_, n) = b.dims();
    let mut c = Matrix::zeros(m, n);
    gemm(a, b, 0.0, &mut c);
    c
}

/// `x · w` for a single row vector.
pub fn vec_mat(x: &[f32], w: &Matrix) -> Vec<f32> {
    assert_eq!(x.len(), w.rows);
    let mut out = vec![0.0f32; w.cols];
    for (xi, wrow) in x.iter().zip(w.data.chunks_exact(w.cols)) {
        for (o, wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix, at: bool, b: &Matrix, bt: bool) -> Matrix {
        let get = |m: &Matrix, t: bool, i: usize, j: usize| if t { m.at(j, i) } else { m.at(i, j) };
        let (m, k) = if at { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let n = if bt { b.rows } else { b.cols };
        let mut c = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                c.data[i * n + j] = (0..k).map(|p| get(a, at, i, p) * get(b, bt, p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_for_all_transposes() {
        let a = Matrix::from_vec(3, 4, (0..12).map(|x| x as f32 * 0.5 - 2.0).collect());
        let b = Matrix::from_vec(4, 5, (0..20).map(|x| (x as f32).sin()).collect());
        let bt = Matrix::from_vec(5, 4, (0..20).map(|x| (x as f32).cos()).collect());
        let at = Matrix::from_vec(4, 3, (0..12).map(|x| x as f32 - 6.0).collect());
        let cases = [
            (matmul(Op::n(&a), Op::n(&b)), naive(&a, false, &b, false)),
            (matmul(Op::n(&a), Op::t(&bt)), naive(&a, false, &bt, true)),
            (matmul(Op::t(&at), Op::n(&b)), naive(&at, true, &b, false)),
            (matmul(Op::t(&at), Op::t(&bt)), naive(&at, true, &bt, true)),
        ];
        for (got, want) in cases {
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() < 1e-4, "{g} vs {w}");
            }
        }
        let v = vec_mat(a.row(1), &b);
        let full = matmul(Op::n(&a), Op::n(&b));
        for (x, y) in v.iter().zip(full.row(1)) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
