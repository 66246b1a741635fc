use std::cell::OnceCell;
use std::rc::Rc;

use super::{DiffError, Tensor};

/// Sparse matrix in compressed-row (CSR) layout.
///
/// Sparse matrices are constants with respect to differentiation: they carry
/// graph structure or fixed feature patterns, never trainable values. The
/// transpose is cached after first use since the backward pass of every
/// sparse product needs it.
#[derive(Debug)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    transpose_cache: OnceCell<Rc<SparseMatrix>>,
}

impl Clone for SparseMatrix {
    fn clone(&self) -> Self {
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_ptr: self.row_ptr.clone(),
            col_idx: self.col_idx.clone(),
            values: self.values.clone(),
            transpose_cache: OnceCell::new(),
        }
    }
}

impl PartialEq for SparseMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && self.row_ptr == other.row_ptr
            && self.col_idx == other.col_idx
            && self.values == other.values
    }
}

impl SparseMatrix {
    /// Builds from (row, col, value) triplets. Duplicate (row, col) pairs and
    /// out-of-bounds indices are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self, DiffError> {
        let mut sorted: Vec<&(usize, usize, f64)> = triplets.iter().collect();
        sorted.sort_by_key(|(r, c, _)| (*r, *c));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut values = Vec::with_capacity(sorted.len());
        let mut prev: Option<(usize, usize)> = None;
        for &&(r, c, v) in &sorted {
            if r >= n_rows || c >= n_cols {
                return Err(DiffError::Shape(format!(
                    "sparse entry ({r},{c}) out of bounds for {n_rows}x{n_cols}"
                )));
            }
            if prev == Some((r, c)) {
                return Err(DiffError::Shape(format!("duplicate sparse entry ({r},{c})")));
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
            transpose_cache: OnceCell::new(),
        })
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

    /// Iterates entries of one row as (col, value).
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        self.col_idx[lo..hi]
            .iter()
            .zip(self.values[lo..hi].iter())
            .map(|(&c, &v)| (c, v))
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out.push((r, c, v));
            }
        }
        out
    }

    pub fn transposed(&self) -> Self {
        let flipped: Vec<(usize, usize, f64)> = self
            .triplets()
            .into_iter()
            .map(|(r, c, v)| (c, r, v))
            .collect();
        // Entries were unique, so the transpose construction cannot fail.
        Self::from_triplets(self.n_cols, self.n_rows, &flipped).expect("transpose of valid CSR")
    }

    /// Shared transpose, computed once per instance.
    pub fn transpose_shared(&self) -> Rc<SparseMatrix> {
        Rc::clone(self.transpose_cache.get_or_init(|| Rc::new(self.transposed())))
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// Sparse-dense product `self × b`.
    pub fn mul_dense(&self, b: &Tensor) -> Result<Tensor, DiffError> {
        if self.n_cols != b.rows() {
            return Err(DiffError::Shape(format!(
                "spmm {}x{} by {}x{}",
                self.n_rows,
                self.n_cols,
                b.rows(),
                b.cols()
            )));
        }
        let n = b.cols();
        let mut out = Tensor::zeros(self.n_rows, n);
        for r in 0..self.n_rows {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let orow = &mut out.data_mut()[r * n..(r + 1) * n];
            for k in lo..hi {
                let c = self.col_idx[k];
                let v = self.values[k];
                let brow = &b.data()[c * n..(c + 1) * n];
                for (o, &bb) in orow.iter_mut().zip(brow.iter()) {
                    *o += v * bb;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_times_anything_is_zero() {
        let s = SparseMatrix::from_triplets(3, 3, &[]).unwrap();
        let b = Tensor::ones(3, 2);
        let out = s.mul_dense(&b).unwrap();
        assert_eq!(out, Tensor::zeros(3, 2));
    }

    #[test]
    fn single_entry_selects_scaled_row() {
        let s = SparseMatrix::from_triplets(2, 3, &[(0, 1, 2.0)]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let out = s.mul_dense(&b).unwrap();
        assert_eq!(out.row(0), &[6.0, 8.0]);
        assert_eq!(out.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn duplicate_entries_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0)]).is_err());
    }

    #[test]
    fn out_of_bounds_rejected() {
        assert!(SparseMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn transpose_matches_dense() {
        let s = SparseMatrix::from_triplets(2, 3, &[(0, 2, 1.5), (1, 0, -2.0)]).unwrap();
        assert_eq!(s.transposed().to_dense(), s.to_dense().transposed());
    }
}
