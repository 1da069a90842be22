//! Sparse matrices and a symmetric positive-definite envelope Cholesky factor.
//!
//! The factorization reorders unknowns with reverse Cuthill-McKee and stores
//! the lower triangle row by row from the first structural non-zero to the
//! diagonal. Mesh-derived systems have small envelopes after reordering, so
//! this stays compact for the mesh sizes handled here while keeping every
//! solve allocation-free apart from the output vector.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
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
        CsrMatrix {
            rows,
            cols,
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

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates the stored `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    /// `Aᵀ y`
    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
        out
    }

    /// Lower-triangle triplets of `Aᵀ diag(w) A`, with `w` one weight per row.
    pub fn weighted_gram_lower(&self, weights: Option<&[f64]>) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            let w = weights.map_or(1.0, |w| w[r]);
            let span = self.indptr[r]..self.indptr[r + 1];
            for a in span.clone() {
                for b in span.clone() {
                    let (ca, cb) = (self.indices[a], self.indices[b]);
                    if ca >= cb {
                        out.push((ca, cb, w * self.values[a] * self.values[b]));
                    }
                }
            }
        }
        out
    }
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    n: usize,
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inv[old] = new`
    inv: Vec<usize>,
    /// First stored column of each (permuted) row.
    first: Vec<usize>,
    /// Offset of each row's first stored entry in `data`.
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl CholeskyFactor {
    /// Factors the symmetric matrix given by lower-triangle triplets
    /// (`row >= col`; duplicates summed; upper entries are ignored).
    pub fn factor(n: usize, lower: &[(usize, usize, f64)]) -> Result<Self> {
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(r, c, _) in lower {
            if r >= n || c >= n {
                return Err(Error::Dimension(format!(
                    "entry ({r}, {c}) outside a {n}x{n} system"
                )));
            }
            if r != c {
                adjacency[r].push(c);
                adjacency[c].push(r);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        let perm = reverse_cuthill_mckee(&adjacency);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for &(r, c, _) in lower {
            if r < c {
                continue;
            }
            let (pr, pc) = (inv[r], inv[c]);
            let (hi, lo) = if pr >= pc { (pr, pc) } else { (pc, pr) };
            first[hi] = first[hi].min(lo);
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0usize;
        for i in 0..n {
            offset.push(total);
            total += i - first[i] + 1;
        }
        offset.push(total);
        let mut data = vec![0.0; total];
        for &(r, c, v) in lower {
            if r < c {
                continue;
            }
            let (pr, pc) = (inv[r], inv[c]);
            let (hi, lo) = if pr >= pc { (pr, pc) } else { (pc, pr) };
            data[offset[hi] + lo - first[hi]] += v;
        }

        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let (row_i, row_j) = (offset[i], offset[j]);
                let mut s = data[row_i + j - fi];
                let li = &data[row_i + k0 - fi..row_i + j - fi];
                let lj = &data[row_j + k0 - fj..row_j + j - fj];
                s -= li.iter().zip(lj).map(|(a, b)| a * b).sum::<f64>();
                let diag_j = data[offset[j] + j - fj];
                data[row_i + j - fi] = s / diag_j;
            }
            let row_i = offset[i];
            let d = data[row_i + i - fi]
                - data[row_i..row_i + i - fi].iter().map(|v| v * v).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Factorization(format!(
                    "matrix not positive definite at unknown {} (pivot {d:e})",
                    perm[i]
                )));
            }
            data[row_i + i - fi] = d.sqrt();
        }

        Ok(CholeskyFactor {
            n,
            perm,
            inv,
            first,
            offset,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        // L y = b
        for i in 0..n {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let s: f64 = row[..i - fi].iter().zip(&y[fi..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / row[i - fi];
        }
        // Lᵀ x = y, column-oriented sweep over the rows of L
        for i in (0..n).rev() {
            let fi = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            y[i] /= row[i - fi];
            let xi = y[i];
            for (k, a) in (fi..i).zip(&row[..i - fi]) {
                y[k] -= a * xi;
            }
        }
        let mut out = vec![0.0; n];
        for (old, o) in out.iter_mut().enumerate() {
            *o = y[self.inv[old]];
        }
        out
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph given as sorted
/// adjacency lists. Returns `perm[new] = old`. Deterministic.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let degree = |v: usize| adjacency[v].len();
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (degree(v), v));
    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adjacency, seed);
        let mut queue = VecDeque::new();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adjacency[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (degree(u), u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

fn pseudo_peripheral(adjacency: &[Vec<usize>], seed: usize) -> usize {
    let mut current = seed;
    let mut best_ecc = 0usize;
    for _ in 0..4 {
        let (far, ecc) = bfs_farthest(adjacency, current);
        if ecc <= best_ecc {
            break;
        }
        best_ecc = ecc;
        current = far;
    }
    current
}

fn bfs_farthest(adjacency: &[Vec<usize>], start: usize) -> (usize, usize) {
    let mut depth = vec![usize::MAX; adjacency.len()];
    depth[start] = 0;
    let mut queue = VecDeque::from([start]);
    let mut far = (start, 0usize);
    while let Some(v) = queue.pop_front() {
        let d = depth[v];
        if d > far.1 || (d == far.1 && adjacency[v].len() < adjacency[far.0].len()) {
            far = (v, d);
        }
        for &u in &adjacency[v] {
            if depth[u] == usize::MAX {
                depth[u] = d + 1;
                queue.push_back(u);
            }
        }
    }
    far
}
