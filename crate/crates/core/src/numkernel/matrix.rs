use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major `f64` matrix.
///
/// All products accumulate each output entry over the inner index in
/// ascending order, so results are bit-identical for identical inputs.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries((0..self.rows).map(|r| self.row(r)))
                .finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        const TILE: usize = 8;
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r0 in (0..self.rows).step_by(TILE) {
            for c0 in (0..self.cols).step_by(TILE) {
                for r in r0..(r0 + TILE).min(self.rows) {
                    for c in c0..(c0 + TILE).min(self.cols) {
                        t.data[c * self.rows + r] = self.data[r * self.cols + c];
                    }
                }
            }
        }
        t
    }

    /// `self × other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_acc(&mut out, self, other);
        Ok(out)
    }

    /// `selfᵀ × other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm_tn_acc(&mut out, self, other);
        Ok(out)
    }

    /// `self × otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: other.shape(),
            });
        }
        self.matmul(&other.transpose())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add_scaled",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|x| x.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(name.to_string()))
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `out += a × b`. Shapes are the caller's responsibility.
///
/// Every output element is accumulated as `s = fma(a[i,k], b[k,j], s)` for
/// `k` ascending, starting from its current value, so the result does not
/// depend on the blocking below.
pub(crate) fn gemm_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    gemm_strided(out, &a.data, a.cols, 1, b);
}

/// `out += aᵀ × b`, same accumulation order as [`gemm_acc`] on `aᵀ`.
pub(crate) fn gemm_tn_acc(out: &mut Matrix, a: &Matrix, b: &Matrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.shape(), (a.cols, b.cols));
    gemm_strided(out, &a.data, 1, a.cols, b);
}

/// Left operand element `(i, k)` lives at `a[i·row_stride + k·k_stride]`.
fn gemm_strided(out: &mut Matrix, a: &[f64], row_stride: usize, k_stride: usize, b: &Matrix) {
    // Panels of `KC` inner indices keep the active slice of `b` in cache.
    const KC: usize = 256;
    let m = out.rows;
    let g = Strided { a, row_stride, k_stride };
    for k0 in (0..b.rows).step_by(KC) {
        let kr = k0..(k0 + KC).min(b.rows);
        let mut i = 0;
        while i + 4 <= m {
            g.rows::<4>(out, b, i, kr.clone());
            i += 4;
        }
        while i < m {
            g.rows::<1>(out, b, i, kr.clone());
            i += 1;
        }
    }
}

struct Strided<'a> {
    a: &'a [f64],
    row_stride: usize,
    k_stride: usize,
}

impl Strided<'_> {
    fn rows<const MR: usize>(&self, out: &mut Matrix, b: &Matrix, i: usize, kr: Range<usize>) {
        let n = b.cols;
        let mut j = 0;
        while j + 16 <= n {
            self.block::<MR, 16>(out, b, i, j, kr.clone());
            j += 16;
        }
        while j + 4 <= n {
            self.block::<MR, 4>(out, b, i, j, kr.clone());
            j += 4;
        }
        while j < n {
            self.block::<MR, 1>(out, b, i, j, kr.clone());
            j += 1;
        }
    }

    #[inline(always)]
    fn block<const MR: usize, const NR: usize>(
        &self,
        out: &mut Matrix,
        b: &Matrix,
        i: usize,
        j: usize,
        kr: Range<usize>,
    ) {
        let n = b.cols;
        let mut acc = [[0.0f64; NR]; MR];
        for (r, row) in acc.iter_mut().enumerate() {
            let o = (i + r) * n + j;
            row.copy_from_slice(&out.data[o..o + NR]);
        }
        let b_panel = &b.data[kr.start * n..kr.end * n];
        for (k, b_row) in kr.zip(b_panel.chunks_exact(n)) {
            let b_blk: &[f64; NR] = b_row[j..j + NR].try_into().expect("block width");
            let base = k * self.k_stride + i * self.row_stride;
            for (r, row) in acc.iter_mut().enumerate() {
                let av = self.a[base + r * self.row_stride];
                for (x, &bv) in row.iter_mut().zip(b_blk) {
                    *x = av.mul_add(bv, *x);
                }
            }
        }
        for (r, row) in acc.iter().enumerate() {
            let o = (i + r) * n + j;
            out.data[o..o + NR].copy_from_slice(row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c, Matrix::from_rows(&[[19.0, 22.0], [43.0, 50.0]]));
    }

    #[test]
    fn identity_and_zero_products() {
        let m = Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 - 5.5);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);
        let z = Matrix::zeros(2, 3).matmul(&m).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            a.matmul(&b),
            Err(Error::DimensionMismatch { op: "matmul", .. })
        ));
        assert!(a.matmul_tn(&Matrix::zeros(3, 1)).is_err());
        assert!(a.matmul_nt(&Matrix::zeros(2, 2)).is_err());
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_fn(5, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 - 2.0);
        let b = Matrix::from_fn(5, 4, |r, c| ((r + 2 * c) % 3) as f64 * 0.5);
        assert_eq!(
            a.matmul_tn(&b).unwrap(),
            a.transpose().matmul(&b).unwrap()
        );
        let d = Matrix::from_fn(4, 3, |r, c| (r as f64) - (c as f64));
        assert_eq!(
            a.matmul_nt(&d).unwrap(),
            a.matmul(&d.transpose()).unwrap()
        );
    }
}
