//! Sparse matrices and a sparse Cholesky solver for the normal equations
//! `AᵀA X = AᵀB` of the non-rigid fitting step.
//!
//! The factorization is the classic up-looking scheme: an elimination tree
//! gives the row patterns of `L`, and rows are computed one at a time by a
//! sparse triangular solve. Fill is kept low by a minimum-degree ordering
//! computed on the block (per-vertex) graph, since the unknowns come in
//! groups of four per vertex.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Compressed sparse row matrix with sorted, de-duplicated column indices.
/// Explicit zeros are kept so the pattern only depends on structure.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from `(row, col, value)` triplets, summing duplicates in input
    /// order.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::DimensionMismatch(format!(
                    "triplet ({r}, {c}) outside {nrows}x{ncols}"
                )));
            }
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let (r, c, v) = triplets[k];
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..nrows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
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

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.nrows,
                self.ncols,
                x.nrows(),
                x.ncols()
            )));
        }
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                for k in 0..x.ncols() {
                    out[(r, k)] += v * x[(c, k)];
                }
            }
        }
        Ok(out)
    }

    /// `Aᵀ Y` for dense `Y`.
    pub fn transpose_mul_dense(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.nrows() != self.nrows {
            return Err(Error::DimensionMismatch(format!(
                "transpose of {}x{} times {}x{}",
                self.nrows,
                self.ncols,
                y.nrows(),
                y.ncols()
            )));
        }
        let mut out = DMatrix::zeros(self.ncols, y.ncols());
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                for k in 0..y.ncols() {
                    out[(c, k)] += v * y[(r, k)];
                }
            }
        }
        Ok(out)
    }

    /// Upper triangle of `AᵀA`.
    pub fn gram(&self) -> SymmetricMatrix {
        let mut triplets = Vec::new();
        for r in 0..self.nrows {
            let span = self.indptr[r]..self.indptr[r + 1];
            let cols = &self.indices[span.clone()];
            let vals = &self.values[span];
            for a in 0..cols.len() {
                for b in a..cols.len() {
                    // Columns are sorted, so (cols[a], cols[b]) is upper.
                    triplets.push((cols[a], cols[b], vals[a] * vals[b]));
                }
            }
        }
        SymmetricMatrix::from_upper_triplets(self.ncols, &triplets)
    }
}

/// Symmetric matrix stored as its upper triangle in compressed sparse
/// column form (row indices `<=` column, sorted).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    n: usize,
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    values: Vec<f64>,
}

impl SymmetricMatrix {
    /// Triplets `(row, col, v)` with `row <= col`; duplicates summed in
    /// input order.
    pub fn from_upper_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].1, triplets[k].0));
        let mut colptr = vec![0; n + 1];
        let mut rowind = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for k in order {
            let (r, c, v) = triplets[k];
            debug_assert!(r <= c);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                rowind.push(r);
                values.push(v);
                colptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for c in 0..n {
            colptr[c + 1] += colptr[c];
        }
        Self {
            n,
            colptr,
            rowind,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for c in 0..self.n {
            for p in self.colptr[c]..self.colptr[c + 1] {
                let r = self.rowind[p];
                m[(r, c)] = self.values[p];
                m[(c, r)] = self.values[p];
            }
        }
        m
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..self.n {
            for p in self.colptr[c]..self.colptr[c + 1] {
                let (r, v) = (self.rowind[p], self.values[p]);
                for k in 0..x.ncols() {
                    out[(r, k)] += v * x[(c, k)];
                    if r != c {
                        out[(c, k)] += v * x[(r, k)];
                    }
                }
            }
        }
        out
    }

    fn same_pattern(&self, other: &SymmetricMatrix) -> bool {
        self.n == other.n && self.colptr == other.colptr && self.rowind == other.rowind
    }
}

/// Minimum-degree ordering of the quotient graph whose nodes are groups of
/// `block` consecutive unknowns. Ties go to the lowest node index, so the
/// ordering is deterministic. Returns `perm` with `perm[new] = old`.
pub fn block_minimum_degree(m: &SymmetricMatrix, block: usize) -> Vec<usize> {
    let block = block.max(1);
    let nodes = m.n.div_ceil(block);
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes];
    for c in 0..m.n {
        for p in m.colptr[c]..m.colptr[c + 1] {
            let (a, b) = (m.rowind[p] / block, c / block);
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
    }
    let mut eliminated = vec![false; nodes];
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> =
        (0..nodes).map(|v| Reverse((adj[v].len(), v))).collect();
    let mut node_order = Vec::with_capacity(nodes);
    while let Some(Reverse((deg, v))) = heap.pop() {
        if eliminated[v] || deg != adj[v].len() {
            continue;
        }
        eliminated[v] = true;
        node_order.push(v);
        let neighbors: Vec<usize> = std::mem::take(&mut adj[v]).into_iter().collect();
        for &u in &neighbors {
            adj[u].remove(&v);
            for &w in &neighbors {
                if w != u {
                    adj[u].insert(w);
                }
            }
            heap.push(Reverse((adj[u].len(), u)));
        }
    }
    node_order
        .into_iter()
        .flat_map(|v| (v * block..((v + 1) * block).min(m.n)).collect::<Vec<_>>())
        .collect()
}

/// Ordering, elimination tree and column layout of `L` for one sparsity
/// pattern. Reusable across numeric factorizations with the same pattern.
#[derive(Debug, Clone)]
pub struct CholeskySymbolic {
    pattern: SymmetricMatrix,
    perm: Vec<usize>,
    /// Permuted upper pattern: column k lists rows `i <= k` of `PAPᵀ`, with
    /// the source position in the unpermuted value array.
    cperm_colptr: Vec<usize>,
    cperm_rows: Vec<usize>,
    cperm_src: Vec<usize>,
    parent: Vec<usize>,
    lcolptr: Vec<usize>,
}

const NONE: usize = usize::MAX;

impl CholeskySymbolic {
    pub fn analyze(m: &SymmetricMatrix, block: usize) -> Self {
        let n = m.n;
        let perm = block_minimum_degree(m, block);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        // Scatter the upper triangle of PAPᵀ by permuted column.
        let mut entries: Vec<(usize, usize, usize)> = Vec::with_capacity(m.values.len());
        for c in 0..n {
            for p in m.colptr[c]..m.colptr[c + 1] {
                let (pi, pj) = (inv[m.rowind[p]], inv[c]);
                let (r, col) = if pi <= pj { (pi, pj) } else { (pj, pi) };
                entries.push((col, r, p));
            }
        }
        entries.sort_unstable();
        let mut cperm_colptr = vec![0; n + 1];
        for &(col, _, _) in &entries {
            cperm_colptr[col + 1] += 1;
        }
        for c in 0..n {
            cperm_colptr[c + 1] += cperm_colptr[c];
        }
        let cperm_rows: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let cperm_src: Vec<usize> = entries.iter().map(|e| e.2).collect();

        // Elimination tree with path compression.
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in cperm_colptr[k]..cperm_colptr[k + 1] {
                let mut i = cperm_rows[p];
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Column counts of L from the row patterns.
        let mut counts = vec![1usize; n];
        let mut mark = vec![NONE; n];
        let mut stack = Vec::new();
        for k in 0..n {
            ereach(
                k,
                &cperm_colptr,
                &cperm_rows,
                &parent,
                &mut mark,
                &mut stack,
            );
            for &i in &stack {
                counts[i] += 1;
            }
        }
        let mut lcolptr = vec![0; n + 1];
        for k in 0..n {
            lcolptr[k + 1] = lcolptr[k] + counts[k];
        }
        Self {
            pattern: SymmetricMatrix {
                n,
                colptr: m.colptr.clone(),
                rowind: m.rowind.clone(),
                values: Vec::new(),
            },
            perm,
            cperm_colptr,
            cperm_rows,
            cperm_src,
            parent,
            lcolptr,
        }
    }

    pub fn matches(&self, m: &SymmetricMatrix) -> bool {
        self.pattern.same_pattern(m)
    }

    pub fn factor_nnz(&self) -> usize {
        *self.lcolptr.last().unwrap_or(&0)
    }
}

/// Nonzero pattern of row `k` of `L` (excluding the diagonal), left in
/// `stack` in topological order. `mark` tracks visits using `k` as stamp.
fn ereach(
    k: usize,
    colptr: &[usize],
    rows: &[usize],
    parent: &[usize],
    mark: &mut [usize],
    stack: &mut Vec<usize>,
) {
    stack.clear();
    mark[k] = k;
    let mut path = Vec::new();
    for p in colptr[k]..colptr[k + 1] {
        let mut i = rows[p];
        if i > k {
            continue;
        }
        path.clear();
        while mark[i] != k {
            path.push(i);
            mark[i] = k;
            i = parent[i];
        }
        // Paths are discovered leaf-first; prepend so ancestors follow.
        while let Some(v) = path.pop() {
            stack.push(v);
        }
    }
    stack.reverse();
}

/// Numeric factor `PAPᵀ = LLᵀ`, `L` lower triangular in CSC with the
/// diagonal first in each column.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    perm: Vec<usize>,
    colptr: Vec<usize>,
    rowind: Vec<usize>,
    values: Vec<f64>,
}

/// Pivots below this fraction of the original diagonal count as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;

impl CholeskyFactor {
    /// Factorizes `m`, which must have the pattern `symbolic` was built for.
    /// On failure every deficient block (index of the group of `block`
    /// unknowns) is reported.
    pub fn factor(symbolic: &CholeskySymbolic, m: &SymmetricMatrix, block: usize) -> Result<Self> {
        if !symbolic.matches(m) {
            return Err(Error::DimensionMismatch(
                "matrix pattern differs from the analyzed pattern".into(),
            ));
        }
        let n = m.n;
        let block = block.max(1);
        let lp = &symbolic.lcolptr;
        let mut li = vec![0usize; lp[n]];
        let mut lx = vec![0f64; lp[n]];
        let mut next: Vec<usize> = lp[..n].to_vec();
        let mut x = vec![0f64; n];
        let mut mark = vec![NONE; n];
        let mut stack = Vec::new();
        let mut deficient = BTreeSet::new();
        for k in 0..n {
            ereach(
                k,
                &symbolic.cperm_colptr,
                &symbolic.cperm_rows,
                &symbolic.parent,
                &mut mark,
                &mut stack,
            );
            let mut diag_orig = 0.0;
            for p in symbolic.cperm_colptr[k]..symbolic.cperm_colptr[k + 1] {
                let i = symbolic.cperm_rows[p];
                let v = m.values[symbolic.cperm_src[p]];
                x[i] += v;
                if i == k {
                    diag_orig += v;
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack {
                let lki = x[i] / lx[lp[i]];
                x[i] = 0.0;
                for p in lp[i] + 1..next[i] {
                    x[li[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                li[p] = k;
                lx[p] = lki;
            }
            if !(d > PIVOT_TOLERANCE * diag_orig.abs()) || !d.is_finite() {
                deficient.insert(symbolic.perm[k] / block);
                // Keep going to collect every deficient block.
                d = if diag_orig > 0.0 { diag_orig } else { 1.0 };
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
        }
        if !deficient.is_empty() {
            return Err(Error::Singular {
                blocks: deficient.into_iter().collect(),
            });
        }
        Ok(Self {
            perm: symbolic.perm.clone(),
            colptr: lp.clone(),
            rowind: li,
            values: lx,
        })
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.perm.len();
        let mut out = DMatrix::zeros(n, b.ncols());
        let mut x = vec![0.0; n];
        for col in 0..b.ncols() {
            for (new, &old) in self.perm.iter().enumerate() {
                x[new] = b[(old, col)];
            }
            for j in 0..n {
                let start = self.colptr[j];
                x[j] /= self.values[start];
                let xj = x[j];
                for p in start + 1..self.colptr[j + 1] {
                    x[self.rowind[p]] -= self.values[p] * xj;
                }
            }
            for j in (0..n).rev() {
                let start = self.colptr[j];
                let mut s = x[j];
                for p in start + 1..self.colptr[j + 1] {
                    s -= self.values[p] * x[self.rowind[p]];
                }
                x[j] = s / self.values[start];
            }
            for (new, &old) in self.perm.iter().enumerate() {
                out[(old, col)] = x[new];
            }
        }
        out
    }
}

/// Solves `min |AX - B|_F` through the normal equations. `cache` holds the
/// symbolic analysis between calls with an unchanged pattern.
pub fn solve_least_squares(
    a: &CsrMatrix,
    b: &DMatrix<f64>,
    block: usize,
    cache: &mut Option<CholeskySymbolic>,
) -> Result<LeastSquaresSolution> {
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "A has {} rows, B has {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let ata = a.gram();
    let atb = a.transpose_mul_dense(b)?;
    if !cache.as_ref().is_some_and(|s| s.matches(&ata)) {
        *cache = Some(CholeskySymbolic::analyze(&ata, block));
    }
    let symbolic = cache.as_ref().unwrap();
    let factor = CholeskyFactor::factor(symbolic, &ata, block)?;
    let mut x = factor.solve(&atb);
    let scale = atb.norm().max(f64::MIN_POSITIVE);
    let mut residual = (&atb - ata.mul_dense(&x)).norm() / scale;
    // One refinement step if the plain solve lost accuracy.
    if residual > 1e-12 {
        let r = &atb - ata.mul_dense(&x);
        let refined = &x + factor.solve(&r);
        let res2 = (&atb - ata.mul_dense(&refined)).norm() / scale;
        if res2 < residual {
            x = refined;
            residual = res2;
        }
    }
    Ok(LeastSquaresSolution {
        x,
        normal_residual: residual,
    })
}

#[derive(Debug, Clone)]
pub struct LeastSquaresSolution {
    pub x: DMatrix<f64>,
    /// `|AᵀB - AᵀA X| / |AᵀB|`.
    pub normal_residual: f64,
}
