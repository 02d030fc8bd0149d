//! Dense row-major f64 matrices.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Mat {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
        assert_eq!(data.len(), rows * cols, "shape {rows}x{cols} does not fit {} values", data.len());
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Mat { rows: rows.len(), cols, data }
    }

    pub fn row_vec(v: &[f64]) -> Mat {
        Mat::from_vec(1, v.len(), v.to_vec())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn col_sums(&self) -> Mat {
        let mut out = Mat::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `r0..r1`.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Mat {
        Mat::from_vec(r1 - r0, self.cols, self.data[r0 * self.cols..r1 * self.cols].to_vec())
    }

    /// Columns `c0..c1`.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Mat {
        let mut data = Vec::with_capacity(self.rows * (c1 - c0));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[c0..c1]);
        }
        Mat::from_vec(self.rows, c1 - c0, data)
    }

    /// Index of the first maximum in row `r`.
    pub fn row_argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (k, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = k;
            }
        }
        best
    }
}

/// `C += op(A) op(B)` with optional transposes expressed through strides.
fn gemm_acc(a: &Mat, ta: bool, b: &Mat, tb: bool, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "inner dimensions differ: {:?}{} x {:?}{}", a.shape(), ta, b.shape(), tb);
    assert_eq!(c.shape(), (m, n), "output shape");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`, whose
    // shapes were checked above; `c` does not alias the inputs.
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
            1.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// A B.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_acc(a, false, b, false, &mut c);
    c
}

/// A B^T.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm_acc(a, false, b, true, &mut c);
    c
}

/// A^T B.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.cols, b.cols);
    gemm_acc(a, true, b, false, &mut c);
    c
}

/// C += A B.
pub fn matmul_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    gemm_acc(a, false, b, false, c);
}

/// C += A B^T.
pub fn matmul_nt_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    gemm_acc(a, false, b, true, c);
}

/// C += A^T B.
pub fn matmul_tn_acc(a: &Mat, b: &Mat, c: &mut Mat) {
    gemm_acc(a, true, b, false, c);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                *c.at_mut(i, j) = (0..a.cols).map(|k| a.at(i, k) * b.at(k, j)).sum();
            }
        }
        c
    }

    #[test]
    fn products_match_naive_loops() {
        let a = Mat::from_vec(3, 4, (0..12).map(|v| (v as f64 * 0.37).sin()).collect());
        let b = Mat::from_vec(4, 2, (0..8).map(|v| (v as f64 * 1.3).cos()).collect());
        let c = naive(&a, &b);
        let close = |x: &Mat, y: &Mat| x.data.iter().zip(&y.data).all(|(p, q)| (p - q).abs() < 1e-14);
        assert!(close(&matmul(&a, &b), &c));
        assert!(close(&matmul_nt(&a, &b.transpose()), &c));
        assert!(close(&matmul_tn(&a.transpose(), &b), &c));
        let mut acc = c.clone();
        matmul_acc(&a, &b, &mut acc);
        assert!(close(&acc, &c.scaled(2.0)));
    }

    #[test]
    fn slicing_and_reductions() {
        let m = Mat::from_rows(&[vec![1.0, 5.0, 2.0], vec![7.0, 0.0, 7.0]]);
        assert_eq!(m.slice_cols(1, 3), Mat::from_rows(&[vec![5.0, 2.0], vec![0.0, 7.0]]));
        assert_eq!(m.slice_rows(1, 2).data, vec![7.0, 0.0, 7.0]);
        assert_eq!(m.col_sums().data, vec![8.0, 5.0, 9.0]);
        assert_eq!(m.row_argmax(0), 1);
        assert_eq!(m.row_argmax(1), 0);
        assert_eq!(m.transpose().at(2, 1), 7.0);
    }
}
