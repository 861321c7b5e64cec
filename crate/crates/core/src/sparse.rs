//! Sparse storage and a direct SPD solver.
//!
//! Assembly goes through [`CooMatrix`] triplets and is compressed into
//! [`CsrMatrix`]. The linear solver is an envelope (skyline) Cholesky
//! factorization on a reverse Cuthill-McKee ordering, which is adequate for
//! 2D meshes up to a few times 10^4 unknowns.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct CooMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl CooMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        CooMatrix {
            nrows,
            ncols,
            ..Default::default()
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.rows.push(row);
        self.cols.push(col);
        self.values.push(value);
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Compresses to CSR, summing duplicates. Duplicates are summed in
    /// ascending order of value so the result does not depend on push order.
    pub fn to_csr(&self) -> CsrMatrix {
        let mut order: Vec<usize> = (0..self.nnz()).collect();
        order.sort_unstable_by(|&a, &b| {
            (self.rows[a], self.cols[a])
                .cmp(&(self.rows[b], self.cols[b]))
                .then(self.values[a].total_cmp(&self.values[b]))
        });
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(order.len());
        let mut data: Vec<f64> = Vec::with_capacity(order.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let key = (self.rows[k], self.cols[k]);
            if last == Some(key) {
                *data.last_mut().unwrap() += self.values[k];
            } else {
                indices.push(key.1);
                data.push(self.values[k]);
                indptr[key.0 + 1] += 1;
                last = Some(key);
            }
        }
        for r in 0..self.nrows {
            indptr[r + 1] += indptr[r];
        }
        CsrMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CsrMatrix {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.indptr[r + 1] - self.indptr[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.data[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ncols {
            return Err(Error::shape(
                "csr_matvec",
                format!("{}x{} matrix times vector of {}", self.nrows, self.ncols, x.len()),
            ));
        }
        Ok((0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect())
    }

    /// `y += A^T x`.
    pub fn transpose_matvec_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.nrows);
        debug_assert_eq!(y.len(), self.ncols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += v * xr;
            }
        }
    }

    pub fn to_coo(&self) -> CooMatrix {
        let mut coo = CooMatrix::new(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                coo.push(r, c, v);
            }
        }
        coo
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        (0..self.nrows).all(|r| self.row(r).all(|(c, v)| (v - self.get(c, r)).abs() <= tol))
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        out
    }
}

/// Reverse Cuthill-McKee permutation of a structurally symmetric matrix.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows;
    let degree: Vec<usize> = (0..n).map(|r| a.row_nnz(r)).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    loop {
        let start = match (0..n).filter(|&v| !visited[v]).min_by_key(|&v| (degree[v], v)) {
            Some(s) => pseudo_peripheral(a, s, &visited),
            None => break,
        };
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = a.row(v).map(|(c, _)| c).filter(|&c| !visited[c]).collect();
            next.sort_unstable_by_key(|&c| (degree[c], c));
            for c in next {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(a: &CsrMatrix, start: usize, blocked: &[bool]) -> usize {
    let mut root = start;
    let mut depth = 0;
    for _ in 0..8 {
        let (last_level, d) = bfs_last_level(a, root, blocked);
        if d <= depth {
            break;
        }
        depth = d;
        root = *last_level
            .iter()
            .min_by_key(|&&v| (a.row_nnz(v), v))
            .unwrap_or(&root);
    }
    root
}

fn bfs_last_level(a: &CsrMatrix, root: usize, blocked: &[bool]) -> (Vec<usize>, usize) {
    let mut seen = blocked.to_vec();
    seen[root] = true;
    let mut level = vec![root];
    let mut depth = 0;
    loop {
        let mut next = Vec::new();
        for &v in &level {
            for (c, _) in a.row(v) {
                if !seen[c] {
                    seen[c] = true;
                    next.push(c);
                }
            }
        }
        if next.is_empty() {
            return (level, depth);
        }
        level = next;
        depth += 1;
    }
}

/// Envelope Cholesky factor `P A P^T = L L^T`.
#[derive(Debug, Clone)]
pub struct SkylineCholesky {
    n: usize,
    perm: Vec<usize>,
    /// first[i]: first column of row i inside the envelope (permuted numbering).
    first: Vec<usize>,
    /// Offset of row i's envelope segment in `values`; row i spans columns first[i]..=i.
    offset: Vec<usize>,
    values: Vec<f64>,
}

impl SkylineCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::shape("skyline_cholesky", "matrix is not square"));
        }
        let n = a.nrows;
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (c, _) in a.row(old) {
                let j = inv[c];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut offset = vec![0usize; n + 1];
        for i in 0..n {
            offset[i + 1] = offset[i] + (i - first[i] + 1);
        }
        let mut values = vec![0.0; offset[n]];
        for old in 0..n {
            let i = inv[old];
            for (c, v) in a.row(old) {
                let j = inv[c];
                if j <= i {
                    values[offset[i] + (j - first[i])] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..=i {
                let fj = first[j];
                let lo = fi.max(fj);
                let mut s = values[offset[i] + (j - fi)];
                let ri = &values[offset[i] + (lo - fi)..offset[i] + (j - fi)];
                let rj = &values[offset[j] + (lo - fj)..offset[j] + (j - fj)];
                for (x, y) in ri.iter().zip(rj) {
                    s -= x * y;
                }
                if j == i {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Solver(format!(
                            "matrix not positive definite: pivot {s:e} at row {}",
                            perm[i]
                        )));
                    }
                    values[offset[i] + (i - fi)] = s.sqrt();
                } else {
                    values[offset[i] + (j - fi)] = s / values[offset[j] + (j - fj)];
                }
            }
        }
        Ok(SkylineCholesky {
            n,
            perm,
            first,
            offset,
            values,
        })
    }

    pub fn envelope_size(&self) -> usize {
        self.values.len()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::shape("skyline_solve", format!("rhs of {} for n={}", b.len(), self.n)));
        }
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            let mut s = y[i];
            for (k, j) in (fi..i).enumerate() {
                s -= row[k] * y[j];
            }
            y[i] = s / row[i - fi];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let row = &self.values[self.offset[i]..self.offset[i + 1]];
            y[i] /= row[i - fi];
            let yi = y[i];
            for (k, j) in (fi..i).enumerate() {
                y[j] -= row[k] * yi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        Ok(x)
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn laplacian_1d(n: usize) -> CsrMatrix {
        let mut coo = CooMatrix::new(n, n);
        for i in 0..n {
            coo.push(i, i, 2.0);
            if i > 0 {
                coo.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                coo.push(i, i + 1, -1.0);
            }
        }
        coo.to_csr()
    }

    #[test]
    fn duplicates_are_summed() {
        let mut coo = CooMatrix::new(2, 2);
        coo.push(1, 0, 1.0);
        coo.push(0, 1, 2.0);
        coo.push(1, 0, 3.0);
        let a = coo.to_csr();
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(1, 0), 4.0);
        assert_eq!(a.get(0, 1), 2.0);
        assert_eq!(a.get(0, 0), 0.0);
    }

    #[test]
    fn cholesky_solves_tridiagonal() {
        let a = laplacian_1d(9);
        let x_true: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let b = a.matvec(&x_true).unwrap();
        let x = SkylineCholesky::factor(&a).unwrap().solve(&b).unwrap();
        for (p, q) in x.iter().zip(&x_true) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let mut coo = CooMatrix::new(2, 2);
        coo.push(0, 0, 1.0);
        coo.push(1, 1, -1.0);
        assert!(matches!(SkylineCholesky::factor(&coo.to_csr()), Err(Error::Solver(_))));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplacian_1d(12);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort_unstable();
        assert_eq!(p, (0..12).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn random_spd_systems(n in 2usize..25, seed in 0u64..1000) {
            // A = M^T M + n I with a sparse random M.
            let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            };
            let mut dense = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    if (i * 7 + j * 3 + seed as usize) % 4 == 0 {
                        dense[i][j] = next();
                    }
                }
            }
            let mut coo = CooMatrix::new(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut v: f64 = (0..n).map(|k| dense[k][i] * dense[k][j]).sum();
                    if i == j { v += n as f64; }
                    if v != 0.0 { coo.push(i, j, v); }
                }
            }
            let a = coo.to_csr();
            let b: Vec<f64> = (0..n).map(|_| next()).collect();
            let x = SkylineCholesky::factor(&a).unwrap().solve(&b).unwrap();
            let r = a.matvec(&x).unwrap();
            let err: f64 = r.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(err < 1e-10);
        }
    }
}
