//! Compressed sparse row matrices with non-negative weights.
//!
//! Every social, feedback and motif matrix in the crate is a [`SparseMatrix`].
//! The representation is canonical: column indices are strictly increasing
//! within each row and explicit zeros are never stored, so two matrices are
//! equal exactly when their stored arrays are equal.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{input, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds a matrix from `(row, col, weight)` triplets, summing duplicates.
    ///
    /// Entries whose summed weight is zero are not stored. Negative or
    /// non-finite weights are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        entries: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, w) in entries {
            if r >= n_rows || c >= n_cols {
                return input(format!(
                    "triplet ({r}, {c}, {w}) out of range for a {n_rows}x{n_cols} matrix"
                ));
            }
            if !w.is_finite() || w < 0.0 {
                return input(format!("triplet ({r}, {c}, {w}) has an invalid weight"));
            }
        }
        let mut sorted = entries.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut rows = Vec::with_capacity(sorted.len());
        for (r, c, w) in sorted {
            if rows.last() == Some(&r) && col_indices.last() == Some(&c) {
                *values.last_mut().unwrap() += w;
            } else {
                rows.push(r);
                col_indices.push(c);
                values.push(w);
            }
        }
        let mut keep_cols = Vec::with_capacity(col_indices.len());
        let mut keep_vals = Vec::with_capacity(values.len());
        for ((r, c), w) in rows.into_iter().zip(col_indices).zip(values) {
            if w != 0.0 {
                row_offsets[r + 1] += 1;
                keep_cols.push(c);
                keep_vals.push(w);
            }
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices: keep_cols,
            values: keep_vals,
        })
    }

    /// Assembles a matrix from per-row `(col, value)` lists already sorted by column.
    fn from_sorted_rows(n_rows: usize, n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert_eq!(rows.len(), n_rows);
        let nnz = rows.iter().map(|r| r.len()).sum();
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        row_offsets.push(0);
        for row in rows {
            for (c, v) in row {
                if v != 0.0 {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Dense conversion of a non-negative matrix. Zeros are dropped.
    pub fn from_dense(dense: ArrayView2<f64>) -> Result<Self> {
        let mut entries = Vec::new();
        for ((r, c), &v) in dense.indexed_iter() {
            if v != 0.0 {
                entries.push((r, c, v));
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), &entries)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_offsets[r]..self.row_offsets[r + 1];
        (&self.col_indices[span.clone()], &self.values[span])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_offsets[r + 1] - self.row_offsets[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for (r, c, v) in self.iter() {
            out[[r, c]] = v;
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let row_offsets = counts.clone();
        let mut cursor = counts;
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // Rows are visited in increasing order, so each output row stays sorted.
        for (r, c, v) in self.iter() {
            let slot = cursor[c];
            col_indices[slot] = r;
            values[slot] = v;
            cursor[c] += 1;
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return input(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(())
    }

    /// Merges the rows of two equally shaped matrices with `f(a, b)`.
    fn zip_rows(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let rows = (0..self.n_rows)
            .map(|r| {
                let (ac, av) = self.row(r);
                let (bc, bv) = other.row(r);
                let mut out = Vec::with_capacity(ac.len() + bc.len());
                let (mut i, mut j) = (0, 0);
                while i < ac.len() || j < bc.len() {
                    if j == bc.len() || (i < ac.len() && ac[i] < bc[j]) {
                        out.push((ac[i], f(av[i], 0.0)));
                        i += 1;
                    } else if i == ac.len() || bc[j] < ac[i] {
                        out.push((bc[j], f(0.0, bv[j])));
                        j += 1;
                    } else {
                        out.push((ac[i], f(av[i], bv[j])));
                        i += 1;
                        j += 1;
                    }
                }
                out
            })
            .collect();
        Self::from_sorted_rows(self.n_rows, self.n_cols, rows)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        Ok(self.zip_rows(other, |a, b| a + b))
    }

    /// Entrywise difference; fails if any entry would become negative.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let out = self.zip_rows(other, |a, b| a - b);
        if let Some((r, c, _)) = out.iter().find(|&(_, _, v)| v < 0.0) {
            return input(format!("sub: negative result at ({r}, {c})"));
        }
        Ok(out)
    }

    /// Entrywise (Hadamard) product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "hadamard")?;
        Ok(self.zip_rows(other, |a, b| a * b))
    }

    /// Keeps only the entries for which `keep(row, col, value)` holds.
    pub fn filter(&self, keep: impl Fn(usize, usize, f64) -> bool) -> Self {
        let rows = (0..self.n_rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .filter(|&(&c, &v)| keep(r, c, v))
                    .map(|(&c, &v)| (c, v))
                    .collect()
            })
            .collect();
        Self::from_sorted_rows(self.n_rows, self.n_cols, rows)
    }

    pub fn without_diagonal(&self) -> Self {
        self.filter(|r, c, _| r != c)
    }

    /// Same pattern with every stored value set to one.
    pub fn binarized(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = 1.0);
        out
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }

    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && *self == self.transpose()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    /// Scales row `r` by `factors[r]`.
    pub fn scale_rows(&self, factors: &[f64]) -> Self {
        let mut out = self.clone();
        for r in 0..self.n_rows {
            let span = out.row_offsets[r]..out.row_offsets[r + 1];
            out.values[span].iter_mut().for_each(|v| *v *= factors[r]);
        }
        out.drop_zeros()
    }

    /// Replaces every stored value `v` at `(r, c)` with `f(r, c, v)`.
    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for r in 0..self.n_rows {
            for idx in out.row_offsets[r]..out.row_offsets[r + 1] {
                out.values[idx] = f(r, out.col_indices[idx], out.values[idx]);
            }
        }
        out.drop_zeros()
    }

    fn drop_zeros(self) -> Self {
        if self.values.iter().all(|&v| v != 0.0) {
            return self;
        }
        self.filter(|_, _, v| v != 0.0)
    }

    /// Sparse-dense product `self · dense`, parallel over output rows.
    pub fn mul_dense(&self, dense: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(
            self.n_cols,
            dense.nrows(),
            "mul_dense: {}x{} times {}x{}",
            self.n_rows,
            self.n_cols,
            dense.nrows(),
            dense.ncols()
        );
        let width = dense.ncols();
        let mut out = Array2::zeros((self.n_rows, width));
        out.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut out_row)| {
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    out_row.scaled_add(v, &dense.row(c));
                }
            });
        out
    }

    /// Sparse-sparse product `self · other` (Gustavson's row-by-row scheme).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.n_cols != other.n_rows {
            return input(format!(
                "matmul: {}x{} times {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            ));
        }
        let n_cols = other.n_cols;
        let rows: Vec<Vec<(usize, f64)>> = (0..self.n_rows)
            .into_par_iter()
            .map_init(
                || (vec![0.0f64; n_cols], vec![false; n_cols]),
                |(acc, seen), r| {
                    let mut touched = Vec::new();
                    let (pc, pv) = self.row(r);
                    for (&p, &a) in pc.iter().zip(pv) {
                        let (qc, qv) = other.row(p);
                        for (&c, &b) in qc.iter().zip(qv) {
                            if !seen[c] {
                                seen[c] = true;
                                touched.push(c);
                            }
                            acc[c] += a * b;
                        }
                    }
                    touched.sort_unstable();
                    touched
                        .into_iter()
                        .map(|c| {
                            let v = acc[c];
                            acc[c] = 0.0;
                            seen[c] = false;
                            (c, v)
                        })
                        .collect()
                },
            )
            .collect();
        Ok(Self::from_sorted_rows(self.n_rows, n_cols, rows))
    }
}

/// Computes `(P · Q) ⊙ T` without forming `P · Q`.
///
/// Only the entries of `P · Q` that fall on the stored pattern of `T` are
/// accumulated, so the cost is bounded by the paths `i → p → j` whose end
/// points `(i, j)` are stored in `T`.
pub fn masked_sparse_product(
    p: &SparseMatrix,
    q: &SparseMatrix,
    t: &SparseMatrix,
) -> Result<SparseMatrix> {
    if p.n_cols != q.n_rows || t.shape() != (p.n_rows, q.n_cols) {
        return input(format!(
            "masked product: P {:?}, Q {:?}, T {:?} are not conformable",
            p.shape(),
            q.shape(),
            t.shape()
        ));
    }
    let n_cols = q.n_cols;
    let rows: Vec<Vec<(usize, f64)>> = (0..p.n_rows)
        .into_par_iter()
        .map_init(
            || vec![usize::MAX; n_cols],
            |slot_of, r| {
                let (tc, tv) = t.row(r);
                if tc.is_empty() {
                    return Vec::new();
                }
                for (slot, &c) in tc.iter().enumerate() {
                    slot_of[c] = slot;
                }
                let mut acc = vec![0.0; tc.len()];
                let (pc, pv) = p.row(r);
                for (&mid, &a) in pc.iter().zip(pv) {
                    let (qc, qv) = q.row(mid);
                    for (&c, &b) in qc.iter().zip(qv) {
                        let slot = slot_of[c];
                        if slot != usize::MAX {
                            acc[slot] += a * b;
                        }
                    }
                }
                for &c in tc {
                    slot_of[c] = usize::MAX;
                }
                tc.iter()
                    .zip(tv)
                    .zip(acc)
                    .map(|((&c, &w), s)| (c, w * s))
                    .collect()
            },
        )
        .collect();
    Ok(SparseMatrix::from_sorted_rows(p.n_rows, n_cols, rows))
}

/// Splits a binary directed adjacency into its mutual part `B = S ⊙ Sᵀ` and
/// its one-way remainder `S − B`.
pub fn split_bidirectional(s: &SparseMatrix) -> Result<(SparseMatrix, SparseMatrix)> {
    if s.n_rows != s.n_cols {
        return input(format!("split_bidirectional: {:?} is not square", s.shape()));
    }
    if !s.is_binary() {
        return input("split_bidirectional: relation matrix must be binary");
    }
    let mutual = s.hadamard(&s.transpose())?;
    let one_way = s.sub(&mutual)?;
    Ok((mutual, one_way))
}
