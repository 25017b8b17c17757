//! Row-compressed sparse matrices and the handful of kernels the metagraph
//! engine and the completion solvers need: products, Hadamard products,
//! transposes and sparse-times-dense multiplication.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted column indices and no explicit
/// duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrMatrix {
            rows,
            cols,
            indptr: vec![0; rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from `(row, col, value)` triplets. Repeated positions
    /// are summed; explicit zeros are kept out of storage.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut trip: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(r, c, _) in &trip {
            if r >= rows || c >= cols {
                return Err(Error::Shape(format!(
                    "entry ({r}, {c}) out of range for {rows}x{cols} matrix"
                )));
            }
        }
        trip.sort_by_key(|&(r, c, _)| (r, c));

        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut values: Vec<f64> = Vec::with_capacity(trip.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = CsrMatrix {
            rows,
            cols,
            indptr,
            indices,
            values,
        };
        m.prune(0.0);
        Ok(m)
    }

    pub fn from_dense(d: &DMatrix<f64>) -> Self {
        let mut indptr = Vec::with_capacity(d.nrows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..d.nrows() {
            for c in 0..d.ncols() {
                let v = d[(r, c)];
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            rows: d.nrows(),
            cols: d.ncols(),
            indptr,
            indices,
            values,
        }
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

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, val) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => val[k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (idx, val) = self.row(r);
            idx.iter().zip(val).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Drops stored entries with `|v| <= floor` (with `floor == 0` only exact
    /// zeros go).
    pub fn prune(&mut self, floor: f64) {
        let keep = |v: f64| if floor > 0.0 { v.abs() >= floor } else { v != 0.0 };
        if self.values.iter().all(|&v| keep(v)) {
            return;
        }
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::with_capacity(self.indices.len());
        let mut values = Vec::with_capacity(self.values.len());
        indptr.push(0);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                if keep(v) {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn map_values(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.values {
            *v = f(*v);
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                let slot = next[c];
                indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        CsrMatrix {
            rows: self.cols,
            cols: self.rows,
            indptr,
            indices,
            values,
        }
    }

    /// Sparse product `self * rhs` (row-wise Gustavson). Fails with a resource
    /// error if the result would hold more than `nnz_budget` entries.
    pub fn matmul(&self, rhs: &CsrMatrix, nnz_budget: usize) -> Result<CsrMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let out_rows: Vec<(Vec<usize>, Vec<f64>)> = (0..self.rows)
            .into_par_iter()
            .map_init(
                || (vec![0.0f64; rhs.cols], vec![usize::MAX; rhs.cols], Vec::new()),
                |(acc, mark, touched), r| {
                    touched.clear();
                    let (idx, val) = self.row(r);
                    for (&k, &a) in idx.iter().zip(val) {
                        let (ridx, rval) = rhs.row(k);
                        for (&c, &b) in ridx.iter().zip(rval) {
                            if mark[c] != r {
                                mark[c] = r;
                                acc[c] = 0.0;
                                touched.push(c);
                            }
                            acc[c] += a * b;
                        }
                    }
                    touched.sort_unstable();
                    let mut cols = Vec::with_capacity(touched.len());
                    let mut vals = Vec::with_capacity(touched.len());
                    for &c in touched.iter() {
                        if acc[c] != 0.0 {
                            cols.push(c);
                            vals.push(acc[c]);
                        }
                    }
                    (cols, vals)
                },
            )
            .collect();

        let total: usize = out_rows.iter().map(|(c, _)| c.len()).sum();
        if total > nnz_budget {
            return Err(Error::Resource(format!(
                "product has {total} nonzeros, budget is {nnz_budget}"
            )));
        }
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::with_capacity(total);
        let mut values = Vec::with_capacity(total);
        indptr.push(0);
        for (c, v) in out_rows {
            indices.extend(c);
            values.extend(v);
            indptr.push(indices.len());
        }
        Ok(CsrMatrix {
            rows: self.rows,
            cols: rhs.cols,
            indptr,
            indices,
            values,
        })
    }

    /// Element-wise product; operands must share a shape.
    pub fn hadamard(&self, rhs: &CsrMatrix) -> Result<CsrMatrix> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!(
                "hadamard of {}x{} and {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut indptr = Vec::with_capacity(self.rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..self.rows {
            let (ai, av) = self.row(r);
            let (bi, bv) = rhs.row(r);
            let (mut p, mut q) = (0, 0);
            while p < ai.len() && q < bi.len() {
                match ai[p].cmp(&bi[q]) {
                    std::cmp::Ordering::Less => p += 1,
                    std::cmp::Ordering::Greater => q += 1,
                    std::cmp::Ordering::Equal => {
                        let v = av[p] * bv[q];
                        if v != 0.0 {
                            indices.push(ai[p]);
                            values.push(v);
                        }
                        p += 1;
                        q += 1;
                    }
                }
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr,
            indices,
            values,
        })
    }

    /// `self * dense`, with `dense` of shape `cols x k`.
    pub fn mul_dense(&self, dense: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.cols, dense.nrows());
        let k = dense.ncols();
        let mut out = DMatrix::zeros(self.rows, k);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                for j in 0..k {
                    out[(r, j)] += v * dense[(c, j)];
                }
            }
        }
        out
    }

    /// `selfᵀ * dense`, with `dense` of shape `rows x k`.
    pub fn tr_mul_dense(&self, dense: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(self.rows, dense.nrows());
        let k = dense.ncols();
        let mut out = DMatrix::zeros(self.cols, k);
        for r in 0..self.rows {
            let (idx, val) = self.row(r);
            for (&c, &v) in idx.iter().zip(val) {
                for j in 0..k {
                    out[(c, j)] += v * dense[(r, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            d[(r, c)] = v;
        }
        d
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Returns a copy whose values are replaced by `f(row, col, value)`,
    /// keeping the sparsity pattern (including entries mapped to zero).
    pub fn with_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> CsrMatrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.values[k] = f(r, self.indices[k], self.values[k]);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn triplets_sum_duplicates_and_drop_zeros() {
        let m = CsrMatrix::from_triplets(2, 2, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.0)]).unwrap();
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 1), 3.0);
    }

    #[test]
    fn out_of_range_triplet_rejected() {
        assert!(CsrMatrix::from_triplets(2, 2, [(2, 0, 1.0)]).is_err());
    }

    #[test]
    fn matmul_matches_dense() {
        let a = dense(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let b = dense(3, 2, &[0.0, 1.0, 4.0, 0.0, 1.0, 1.0]);
        let c = CsrMatrix::from_dense(&a)
            .matmul(&CsrMatrix::from_dense(&b), usize::MAX)
            .unwrap();
        assert_eq!(c.to_dense(), &a * &b);
    }

    #[test]
    fn matmul_budget_is_enforced() {
        let a = CsrMatrix::from_dense(&DMatrix::from_element(3, 3, 1.0));
        assert!(matches!(a.matmul(&a, 8), Err(Error::Resource(_))));
        assert_eq!(a.matmul(&a, 9).unwrap().nnz(), 9);
    }

    #[test]
    fn transpose_and_hadamard() {
        let a = dense(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let s = CsrMatrix::from_dense(&a);
        assert_eq!(s.transpose().to_dense(), a.transpose());
        let h = s.hadamard(&s).unwrap();
        assert_eq!(h.to_dense(), a.component_mul(&a));
        assert!(s.hadamard(&s.transpose()).is_err());
    }

    #[test]
    fn sparse_dense_products() {
        let a = dense(2, 3, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        let s = CsrMatrix::from_dense(&a);
        let x = dense(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = dense(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        assert_eq!(s.mul_dense(&x), &a * &x);
        assert_eq!(s.tr_mul_dense(&y), a.transpose() * &y);
    }

    #[test]
    fn prune_with_floor() {
        let mut m = CsrMatrix::from_triplets(1, 3, [(0, 0, 0.1), (0, 1, 1.0), (0, 2, -0.5)]).unwrap();
        m.prune(0.5);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 0), 0.0);
    }
}
