//! Minimal compressed-sparse-column matrix used across the crate.
//!
//! Construction goes through triplets; duplicates are summed and exact
//! zeros dropped, so the stored pattern is canonical.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CscMat {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMat {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowidx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CscMat {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowidx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut t: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        t.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; ncols + 1];
        let mut rowidx = Vec::with_capacity(t.len());
        let mut values = Vec::with_capacity(t.len());
        let mut i = 0;
        while i < t.len() {
            let (r, c, mut v) = t[i];
            assert!(r < nrows && c < ncols, "triplet out of bounds");
            let mut j = i + 1;
            while j < t.len() && t[j].0 == r && t[j].1 == c {
                v += t[j].2;
                j += 1;
            }
            if v != 0.0 {
                rowidx.push(r);
                values.push(v);
                colptr[c + 1] += 1;
            }
            i = j;
        }
        for c in 0..ncols {
            colptr[c + 1] += colptr[c];
        }
        CscMat {
            nrows,
            ncols,
            colptr,
            rowidx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowidx(&self) -> &[usize] {
        &self.rowidx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Entries of column `c` as `(row, value)` pairs.
    pub fn col(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.colptr[c]..self.colptr[c + 1];
        range
            .clone()
            .map(move |k| (self.rowidx[k], self.values[k]))
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| self.col(c).map(move |(r, v)| (r, c, v)))
    }

    /// `y += alpha * A x`
    pub fn matvec_acc(&self, x: &[f64], alpha: f64, y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowidx[k]] += self.values[k] * xc;
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_acc(x, 1.0, &mut y);
        y
    }

    /// `y += alpha * A^T x`
    pub fn matvec_transpose_acc(&self, x: &[f64], alpha: f64, y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.colptr[c]..self.colptr[c + 1] {
                acc += self.values[k] * x[self.rowidx[k]];
            }
            y[c] += alpha * acc;
        }
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.matvec_transpose_acc(x, 1.0, &mut y);
        y
    }

    /// Same stored pattern (dimensions, column pointers and row indices).
    pub fn same_pattern(&self, other: &CscMat) -> bool {
        self.nrows == other.nrows
            && self.ncols == other.ncols
            && self.colptr == other.colptr
            && self.rowidx == other.rowidx
    }

    pub fn transpose(&self) -> CscMat {
        let mut colptr = vec![0usize; self.nrows + 1];
        for &r in &self.rowidx {
            colptr[r + 1] += 1;
        }
        for i in 0..self.nrows {
            colptr[i + 1] += colptr[i];
        }
        let mut rowidx = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut cursor = colptr.clone();
        for c in 0..self.ncols {
            for k in self.colptr[c]..self.colptr[c + 1] {
                let r = self.rowidx[k];
                rowidx[cursor[r]] = c;
                values[cursor[r]] = self.values[k];
                cursor[r] += 1;
            }
        }
        CscMat {
            nrows: self.ncols,
            ncols: self.nrows,
            colptr,
            rowidx,
            values,
        }
    }

    /// Lower triangle of the normal matrix `A'A + mu I`.
    pub fn normal_matrix_lower(&self, mu: f64) -> CscMat {
        let n = self.ncols;
        let at = self.transpose(); // rows of A become columns
        let mut acc = vec![0.0f64; n];
        let mut seen = vec![false; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        for k in 0..n {
            for (r, v) in self.col(k) {
                for (j, w) in at.col(r) {
                    if j < k {
                        continue;
                    }
                    if !seen[j] {
                        seen[j] = true;
                        touched.push(j);
                    }
                    acc[j] += v * w;
                }
            }
            let mut has_diag = false;
            for &j in &touched {
                let val = acc[j] + if j == k { mu } else { 0.0 };
                has_diag |= j == k;
                if val != 0.0 {
                    triplets.push((j, k, val));
                }
                acc[j] = 0.0;
                seen[j] = false;
            }
            if !has_diag && mu != 0.0 {
                triplets.push((k, k, mu));
            }
            touched.clear();
        }
        CscMat::from_triplets(n, n, triplets)
    }
}
