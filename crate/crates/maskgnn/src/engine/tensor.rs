//! Dense row-major matrices and a constant CSR matrix for sparse inputs.
//!
//! Everything is 64-bit. The engine is desk-scale by design: matrices are
//! owned `Vec<f64>` buffers and the only clever part is routing large dense
//! products through `matrixmultiply`.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer does not match shape");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Single scalar payload of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on non-scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// `self @ other`, dense product via matrixmultiply.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {:?} @ {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Tensor::zeros(self.rows, other.cols);
        dgemm_into(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            [self.cols as isize, 1],
            &other.data,
            [other.cols as isize, 1],
            &mut out.data,
        );
        out
    }

    /// `self^T @ other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.rows, other.rows,
            "t_matmul shape mismatch: {:?}^T @ {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Tensor::zeros(self.cols, other.cols);
        dgemm_into(
            self.cols,
            self.rows,
            other.cols,
            &self.data,
            [1, self.cols as isize],
            &other.data,
            [other.cols as isize, 1],
            &mut out.data,
        );
        out
    }

    /// `self @ other^T` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols, other.cols,
            "matmul_t shape mismatch: {:?} @ {:?}^T",
            self.shape(),
            other.shape()
        );
        let mut out = Tensor::zeros(self.rows, other.rows);
        dgemm_into(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            [self.cols as isize, 1],
            &other.data,
            [1, other.cols as isize],
            &mut out.data,
        );
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }
}

fn dgemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa_csa: [isize; 2],
    b: &[f64],
    rsb_csb: [isize; 2],
    c: &mut [f64],
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa_csa[0],
            rsa_csa[1],
            b.as_ptr(),
            rsb_csb[0],
            rsb_csb[1],
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Immutable CSR matrix used for constant sparse inputs (bag-of-words
/// features and per-epoch masked aggregates of them). Never differentiated
/// through: gradients stop at dense factors.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_rows(rows: usize, cols: usize, entries: impl Iterator<Item = Vec<(u32, f64)>>) -> Self {
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in entries {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0), "row not sorted");
            for (c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        assert_eq!(row_offsets.len(), rows + 1, "row count mismatch");
        SparseMatrix {
            rows,
            cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn from_dense(t: &Tensor) -> Self {
        SparseMatrix::from_rows(
            t.rows(),
            t.cols(),
            (0..t.rows()).map(|i| {
                t.row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j as u32, *v))
                    .collect()
            }),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self @ dense`.
    pub fn matmul(&self, dense: &Tensor) -> Tensor {
        assert_eq!(self.cols, dense.rows(), "sparse matmul shape mismatch");
        let n = dense.cols();
        let mut out = Tensor::zeros(self.rows, n);
        for i in 0..self.rows {
            let (cols, vals) = self.row_entries(i);
            let orow = out.row_mut(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let drow = dense.row(c as usize);
                for j in 0..n {
                    orow[j] += v * drow[j];
                }
            }
        }
        out
    }

    /// `self^T @ dense`; used for weight gradients of sparse-input products.
    pub fn t_matmul(&self, dense: &Tensor) -> Tensor {
        assert_eq!(self.rows, dense.rows(), "sparse t_matmul shape mismatch");
        let n = dense.cols();
        let mut out = Tensor::zeros(self.cols, n);
        for i in 0..self.rows {
            let (cols, vals) = self.row_entries(i);
            let drow = dense.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let orow = out.row_mut(c as usize);
                for j in 0..n {
                    orow[j] += v * drow[j];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (cols, vals) = self.row_entries(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(i, c as usize, v);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree_with_explicit() {
        let a = Tensor::from_fn(4, 3, |i, j| (i * 3 + j) as f64 * 0.5 - 2.0);
        let b = Tensor::from_fn(4, 2, |i, j| (i + j) as f64 * 0.25 + 1.0);
        let atb = a.t_matmul(&b);
        let mut expect = Tensor::zeros(3, 2);
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(k, i) * b.get(k, j);
                }
                expect.set(i, j, s);
            }
        }
        for (x, y) in atb.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_matmul_matches_dense() {
        let d = Tensor::from_fn(5, 7, |i, j| if (i + j) % 3 == 0 { (i * j) as f64 - 2.0 } else { 0.0 });
        let s = SparseMatrix::from_dense(&d);
        let w = Tensor::from_fn(7, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let via_sparse = s.matmul(&w);
        let via_dense = d.matmul(&w);
        for (x, y) in via_sparse.data().iter().zip(via_dense.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let g = Tensor::from_fn(5, 4, |i, j| (i + 2 * j) as f64 * 0.1);
        let t_sparse = s.t_matmul(&g);
        let t_dense = d.t_matmul(&g);
        for (x, y) in t_sparse.data().iter().zip(t_dense.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
