//! Compressed sparse row matrices used as constant operators on the tape.

use crate::error::{AdError, AdResult};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a CSR matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed; entries within a row are sorted by column.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> AdResult<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= n_rows {
                return Err(AdError::Index { op: "csr", index: r, len: n_rows });
            }
            if c >= n_cols {
                return Err(AdError::Index { op: "csr", index: c, len: n_cols });
            }
        }
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0; n_rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self { n_rows, n_cols, indptr, indices, values })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored `(col, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(col, _)| col == c).map_or(0.0, |(_, v)| v)
    }

    /// Dense row-major copy.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_rows * self.n_cols];
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out[r * self.n_cols + c] = v;
            }
        }
        out
    }

    /// `out = self * x` where `x` is row-major `n_cols x width`.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_cols * width);
        let mut out = vec![0.0; self.n_rows * width];
        for r in 0..self.n_rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                for (o, xi) in dst.iter_mut().zip(&x[c * width..(c + 1) * width]) {
                    *o += v * xi;
                }
            }
        }
        out
    }

    /// `out = self^T * x` where `x` is row-major `n_rows x width`.
    pub fn transpose_matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_rows * width);
        let mut out = vec![0.0; self.n_cols * width];
        for r in 0..self.n_rows {
            let src = &x[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                for (o, xi) in out[c * width..(c + 1) * width].iter_mut().zip(src) {
                    *o += v * xi;
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_are_summed_and_sorted() {
        let m = CsrMatrix::from_triplets(2, 3, &[(1, 2, 1.0), (0, 1, 2.0), (1, 2, 0.5), (1, 0, 3.0)]).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.to_dense(), vec![0.0, 2.0, 0.0, 3.0, 0.0, 1.5]);
        assert_eq!(m.matmul_dense(&[1.0, 1.0, 1.0], 1), vec![2.0, 4.5]);
        assert_eq!(m.transpose_matmul_dense(&[1.0, 2.0], 1), vec![6.0, 2.0, 3.0]);
    }

    #[test]
    fn out_of_range_triplet_is_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }
}
