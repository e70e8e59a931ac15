//! Sparse matrices in CSR layout and direct solution via sparse LU or
//! Cholesky.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Side;

use crate::error::LinalgError;

pub const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, Default)]
pub struct TripletBuffer {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuffer {
    pub fn new(rows: usize, cols: usize) -> Self {
        TripletBuffer {
            rows,
            cols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(rows: usize, cols: usize, cap: usize) -> Self {
        TripletBuffer {
            rows,
            cols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        self.entries.push((row, col, value));
    }

    pub fn extend(&mut self, other: TripletBuffer) {
        self.entries.extend(other.entries);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn assemble(self) -> Result<SparseMatrix, LinalgError> {
        let (rows, cols) = (self.rows, self.cols);
        assemble(rows, cols, self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Sums duplicates and sorts column indices per row.
pub fn assemble(rows: usize, cols: usize, triplets: TripletBuffer) -> Result<SparseMatrix, LinalgError> {
    let mut entries = triplets.entries;
    if let Some(&(row, col, _)) = entries.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
        return Err(LinalgError::IndexOutOfRange { row, col, rows, cols });
    }
    entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
    let mut row_ptr = vec![0usize; rows + 1];
    let mut col_idx = Vec::with_capacity(entries.len());
    let mut values: Vec<f64> = Vec::with_capacity(entries.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in entries {
        if last == Some((r, c)) {
            *values.last_mut().expect("nonempty") += v;
        } else {
            col_idx.push(c);
            values.push(v);
            row_ptr[r + 1] += 1;
            last = Some((r, c));
        }
    }
    for r in 0..rows {
        row_ptr[r + 1] += row_ptr[r];
    }
    Ok(SparseMatrix {
        rows,
        cols,
        row_ptr,
        col_idx,
        values,
    })
}

impl SparseMatrix {
    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[range.clone()].binary_search(&c) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `xᵀ A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.matvec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    /// Copy with `v` added to the listed diagonal entries.
    pub fn with_diagonal_added(&self, entries: &[(usize, f64)]) -> SparseMatrix {
        let mut out = self.clone();
        let mut missing = Vec::new();
        for &(i, v) in entries {
            let range = out.row_ptr[i]..out.row_ptr[i + 1];
            match out.col_idx[range.clone()].binary_search(&i) {
                Ok(k) => out.values[range.start + k] += v,
                Err(_) => missing.push((i, v)),
            }
        }
        if missing.is_empty() {
            return out;
        }
        let mut t = TripletBuffer::with_capacity(self.rows, self.cols, self.nnz() + missing.len());
        for r in 0..self.rows {
            for (c, v) in out.row(r) {
                t.push(r, c, v);
            }
        }
        for (i, v) in missing {
            t.push(i, i, v);
        }
        t.assemble().expect("diagonal indices are in range")
    }

    /// Replaces the listed rows by identity rows.
    pub fn with_identity_rows(&self, replace: &[bool]) -> SparseMatrix {
        assert_eq!(replace.len(), self.rows);
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz());
        let mut values = Vec::with_capacity(self.nnz());
        row_ptr.push(0);
        for r in 0..self.rows {
            if replace[r] {
                col_idx.push(r);
                values.push(1.0);
            } else {
                for (c, v) in self.row(r) {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut t = TripletBuffer::with_capacity(self.cols, self.rows, self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                t.push(c, r, v);
            }
        }
        t.assemble().expect("transpose indices are in range")
    }

    /// Largest entrywise asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        let mut max = 0.0f64;
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                max = max.max((v - t.get(r, c)).abs());
            }
        }
        max
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        d
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Direct sparse LU solve. `blocks` describes the block layout for error
/// messages.
/// Sparse LU solve with a relative residual check; `blocks` names the
/// unknown blocks in error messages.
pub fn solve_labeled(a: &SparseMatrix, rhs: &[f64], blocks: &str) -> Result<Vec<f64>, LinalgError> {
    factor_and_solve(a, rhs, blocks, false)
}

/// Sparse Cholesky solve for symmetric positive definite matrices (only the
/// lower triangle is read). Falls back to LU when the factorization fails.
pub fn solve_spd_labeled(a: &SparseMatrix, rhs: &[f64], blocks: &str) -> Result<Vec<f64>, LinalgError> {
    match factor_and_solve(a, rhs, blocks, true) {
        Err(LinalgError::Singular { reason, .. }) => {
            log::debug!("cholesky failed ({reason}), retrying with LU");
            factor_and_solve(a, rhs, blocks, false)
        }
        other => other,
    }
}

fn factor_and_solve(a: &SparseMatrix, rhs: &[f64], blocks: &str, spd: bool) -> Result<Vec<f64>, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    if rhs.len() != a.rows {
        return Err(LinalgError::RhsLength {
            expected: a.rows,
            got: rhs.len(),
        });
    }
    let n = a.rows;
    if n == 0 {
        return Ok(Vec::new());
    }
    let singular = |reason: String| LinalgError::Singular {
        blocks: blocks.to_string(),
        reason,
    };
    let mut triplets = Vec::with_capacity(a.nnz());
    for r in 0..n {
        for (c, v) in a.row(r) {
            if !spd || c <= r {
                triplets.push(Triplet::new(r, c, v));
            }
        }
    }
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| singular(format!("{e:?}")))?;
    drop(triplets);
    let b = Col::<f64>::from_fn(n, |i| rhs[i]);
    let sol = if spd {
        mat.sp_cholesky(Side::Lower).map_err(|e| singular(format!("{e:?}")))?.solve(&b)
    } else {
        mat.sp_lu().map_err(|e| singular(format!("{e:?}")))?.solve(&b)
    };
    drop(mat);
    let x: Vec<f64> = (0..n).map(|i| sol[i]).collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(singular("non-finite solution".into()));
    }
    let r = a.matvec(&x);
    let res: Vec<f64> = r.iter().zip(rhs).map(|(a, b)| a - b).collect();
    let scale = norm2(rhs);
    let residual = if scale > 0.0 { norm2(&res) / scale } else { norm2(&res) };
    if residual > RESIDUAL_TOL {
        return Err(LinalgError::Residual {
            residual,
            tol: RESIDUAL_TOL,
            blocks: blocks.to_string(),
        });
    }
    Ok(x)
}

pub fn solve(a: &SparseMatrix, rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    solve_labeled(a, rhs, "unlabeled")
}
