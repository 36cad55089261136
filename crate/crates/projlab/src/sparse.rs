//! Minimal sparse/structured linear algebra used by the lab: CSR matrices,
//! block-diagonal mass matrices, a banded Cholesky factorization for shift-invert
//! solves, and conjugate gradients. Everything is deterministic and single-threaded;
//! reductions run in index order so reports are byte-stable for a fixed seed.

use crate::{Error, Result};
use std::io::Write as _;

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Csr { nrows, ncols, indptr: vec![0; nrows + 1], indices: Vec::new(), data: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            data: vec![1.0; n],
        }
    }

    /// Builds from (row, col, value) triplets; duplicates are summed, exact zeros kept
    /// out. The triplet buffer is consumed to avoid a second allocation at the sizes
    /// the operator assembly produces.
    pub fn from_triplets(nrows: usize, ncols: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; nrows + 1];
        let mut indices = Vec::with_capacity(trip.len());
        let mut data = Vec::with_capacity(trip.len());
        let mut k = 0;
        while k < trip.len() {
            let (r, c, mut v) = trip[k];
            k += 1;
            while k < trip.len() && trip[k].0 == r && trip[k].1 == c {
                v += trip[k].2;
                k += 1;
            }
            if v != 0.0 {
                debug_assert!(r < nrows && c < ncols);
                indices.push(c);
                data.push(v);
                indptr[r + 1] += 1;
            }
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Csr { nrows, ncols, indptr, indices, data }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        (&self.indices[a..b], &self.data[a..b])
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut s = 0.0;
            for (&c, &v) in cols.iter().zip(vals) {
                s += v * x[c];
            }
            y[i] = s;
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec(x, &mut y);
        y
    }

    /// y += A^T x (used by CG on normal equations without materializing A^T)
    pub fn matvec_transpose_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let xi = x[i];
            for (&c, &v) in cols.iter().zip(vals) {
                y[c] += v * xi;
            }
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut indptr = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            indptr[c + 1] += 1;
        }
        for i in 0..self.ncols {
            indptr[i + 1] += indptr[i];
        }
        let mut indices = vec![0usize; self.nnz()];
        let mut data = vec![0.0; self.nnz()];
        let mut next = indptr.clone();
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                let p = next[c];
                indices[p] = i;
                data[p] = v;
                next[c] += 1;
            }
        }
        Csr { nrows: self.ncols, ncols: self.nrows, indptr, indices, data }
    }

    /// C = A B, row-by-row with a dense accumulator (Gustavson).
    pub fn matmul(&self, b: &Csr) -> Csr {
        assert_eq!(self.ncols, b.nrows, "matmul shape mismatch");
        let n = b.ncols;
        let mut acc = vec![0.0f64; n];
        let mut mark = vec![usize::MAX; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::new();
        let mut data = Vec::new();
        for i in 0..self.nrows {
            touched.clear();
            let (acols, avals) = self.row(i);
            for (&k, &av) in acols.iter().zip(avals) {
                let (bcols, bvals) = b.row(k);
                for (&j, &bv) in bcols.iter().zip(bvals) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        touched.push(j);
                    }
                    acc[j] += av * bv;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                if acc[j] != 0.0 {
                    indices.push(j);
                    data.push(acc[j]);
                }
            }
            indptr[i + 1] = indices.len();
        }
        Csr { nrows: self.nrows, ncols: n, indptr, indices, data }
    }

    /// A + alpha B
    pub fn add_scaled(&self, b: &Csr, alpha: f64) -> Csr {
        assert_eq!(self.nrows, b.nrows);
        assert_eq!(self.ncols, b.ncols);
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.nnz() + b.nnz());
        let mut data = Vec::with_capacity(self.nnz() + b.nnz());
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            let (cb, vb) = b.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ca.len() || q < cb.len() {
                let (col, val) = if q >= cb.len() || (p < ca.len() && ca[p] < cb[q]) {
                    let r = (ca[p], va[p]);
                    p += 1;
                    r
                } else if p >= ca.len() || cb[q] < ca[p] {
                    let r = (cb[q], alpha * vb[q]);
                    q += 1;
                    r
                } else {
                    let r = (ca[p], va[p] + alpha * vb[q]);
                    p += 1;
                    q += 1;
                    r
                };
                if val != 0.0 {
                    indices.push(col);
                    data.push(val);
                }
            }
            indptr[i + 1] = indices.len();
        }
        Csr { nrows: self.nrows, ncols: self.ncols, indptr, indices, data }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// Entry lookup by binary search; for tests and small diagnostics.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(p) => vals[p],
            Err(_) => 0.0,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// ||A - A^T||_max, absolute.
    pub fn symmetry_defect(&self) -> f64 {
        assert_eq!(self.nrows, self.ncols);
        let t = self.transpose();
        self.add_scaled(&t, -1.0).max_abs()
    }

    /// (A + A^T)/2
    pub fn symmetrize(&self) -> Csr {
        let t = self.transpose();
        let mut s = self.add_scaled(&t, 1.0);
        s.scale(0.5);
        s
    }

    /// Largest |i - j| over stored entries.
    pub fn bandwidth(&self) -> usize {
        let mut b = 0usize;
        for i in 0..self.nrows {
            let (cols, _) = self.row(i);
            for &c in cols {
                b = b.max(i.abs_diff(c));
            }
        }
        b
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m[(i, c)] = v;
            }
        }
        m
    }

    /// Matrix Market coordinate format, 1-based, full pattern.
    pub fn write_matrix_market(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.nrows, self.ncols, self.nnz())?;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                writeln!(w, "{} {} {:.17e}", i + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Block-diagonal symmetric matrix with uniform block size; the mass matrices
/// (quadrature weight times pointwise Gram block) have this shape on every grid.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    pub nblocks: usize,
    pub bs: usize,
    /// nblocks * bs * bs, blocks stored row-major.
    pub data: Vec<f64>,
}

impl BlockDiag {
    pub fn new(nblocks: usize, bs: usize) -> Self {
        BlockDiag { nblocks, bs, data: vec![0.0; nblocks * bs * bs] }
    }

    pub fn dim(&self) -> usize {
        self.nblocks * self.bs
    }

    pub fn block(&self, k: usize) -> &[f64] {
        &self.data[k * self.bs * self.bs..(k + 1) * self.bs * self.bs]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.bs * self.bs..(k + 1) * self.bs * self.bs]
    }

    /// y = M x
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let bs = self.bs;
        for k in 0..self.nblocks {
            let b = self.block(k);
            let xs = &x[k * bs..(k + 1) * bs];
            let ys = &mut y[k * bs..(k + 1) * bs];
            for i in 0..bs {
                let mut s = 0.0;
                for j in 0..bs {
                    s += b[i * bs + j] * xs[j];
                }
                ys[i] = s;
            }
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        self.matvec(x, &mut y);
        y
    }

    /// x^T M y, accumulated in index order.
    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        let bs = self.bs;
        let mut total = 0.0;
        for k in 0..self.nblocks {
            let b = self.block(k);
            let xs = &x[k * bs..(k + 1) * bs];
            let ys = &y[k * bs..(k + 1) * bs];
            for i in 0..bs {
                for j in 0..bs {
                    total += xs[i] * b[i * bs + j] * ys[j];
                }
            }
        }
        total
    }

    pub fn norm(&self, x: &[f64]) -> f64 {
        self.inner(x, x).max(0.0).sqrt()
    }

    /// Per-block Cholesky M = L L^T. Errors if any block is not positive definite.
    /// For diagonal metrics every block is diagonal, so L is diagonal and the
    /// factorization is exact entrywise with no cancellation.
    pub fn cholesky(&self) -> Result<BlockChol> {
        let bs = self.bs;
        let mut l = vec![0.0; self.data.len()];
        for k in 0..self.nblocks {
            let b = self.block(k);
            let lb = &mut l[k * bs * bs..(k + 1) * bs * bs];
            for i in 0..bs {
                for j in 0..=i {
                    let mut s = b[i * bs + j];
                    for p in 0..j {
                        s -= lb[i * bs + p] * lb[j * bs + p];
                    }
                    if i == j {
                        if s <= 0.0 {
                            return Err(Error::SolverError(format!(
                                "mass block {k} not positive definite (pivot {s:.3e})"
                            )));
                        }
                        lb[i * bs + i] = s.sqrt();
                    } else {
                        lb[i * bs + j] = s / lb[j * bs + j];
                    }
                }
            }
        }
        Ok(BlockChol { nblocks: self.nblocks, bs, l })
    }

    pub fn to_csr(&self) -> Csr {
        let bs = self.bs;
        let mut trip = Vec::with_capacity(self.data.len());
        for k in 0..self.nblocks {
            let b = self.block(k);
            for i in 0..bs {
                for j in 0..bs {
                    if b[i * bs + j] != 0.0 {
                        trip.push((k * bs + i, k * bs + j, b[i * bs + j]));
                    }
                }
            }
        }
        Csr::from_triplets(self.dim(), self.dim(), trip)
    }

    /// Smallest eigenvalue over all blocks (positivity diagnostic).
    pub fn min_eigenvalue(&self) -> f64 {
        let bs = self.bs;
        let mut lo = f64::INFINITY;
        for k in 0..self.nblocks {
            let m = nalgebra::DMatrix::from_row_slice(bs, bs, self.block(k));
            let ev = m.symmetric_eigenvalues();
            for e in ev.iter() {
                lo = lo.min(*e);
            }
        }
        lo
    }
}

/// Cholesky factors of a BlockDiag, used to reduce generalized pencils to standard
/// form and to M-orthonormalize subspace bases.
#[derive(Debug, Clone)]
pub struct BlockChol {
    pub nblocks: usize,
    pub bs: usize,
    l: Vec<f64>,
}

impl BlockChol {
    fn block(&self, k: usize) -> &[f64] {
        &self.l[k * self.bs * self.bs..(k + 1) * self.bs * self.bs]
    }

    /// x <- L^{-1} x
    pub fn solve_l_inplace(&self, x: &mut [f64]) {
        let bs = self.bs;
        for k in 0..self.nblocks {
            let lb = self.block(k);
            let xs = &mut x[k * bs..(k + 1) * bs];
            for i in 0..bs {
                let mut s = xs[i];
                for j in 0..i {
                    s -= lb[i * bs + j] * xs[j];
                }
                xs[i] = s / lb[i * bs + i];
            }
        }
    }

    /// x <- L^{-T} x
    pub fn solve_lt_inplace(&self, x: &mut [f64]) {
        let bs = self.bs;
        for k in 0..self.nblocks {
            let lb = self.block(k);
            let xs = &mut x[k * bs..(k + 1) * bs];
            for ii in 0..bs {
                let i = bs - 1 - ii;
                let mut s = xs[i];
                for j in (i + 1)..bs {
                    s -= lb[j * bs + i] * xs[j];
                }
                xs[i] = s / lb[i * bs + i];
            }
        }
    }

    /// x <- L^T x
    pub fn mul_lt_inplace(&self, x: &mut [f64]) {
        let bs = self.bs;
        for k in 0..self.nblocks {
            let lb = self.block(k);
            let xs = &mut x[k * bs..(k + 1) * bs];
            for i in 0..bs {
                let mut s = lb[i * bs + i] * xs[i];
                for j in (i + 1)..bs {
                    s += lb[j * bs + i] * xs[j];
                }
                xs[i] = s;
            }
        }
    }

    /// x <- M^{-1} x via the two triangular solves.
    pub fn solve_inplace(&self, x: &mut [f64]) {
        self.solve_l_inplace(x);
        self.solve_lt_inplace(x);
    }
}

/// Symmetric banded matrix in lower storage: entry (i, j) with 0 <= i - j <= hbw
/// lives at data[i*(hbw+1) + (i-j)]. Cholesky runs in place; n * hbw^2 / 2 flops.
pub struct BandMatrix {
    pub dim: usize,
    pub hbw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    /// Extracts the lower band of a symmetric CSR matrix.
    pub fn from_csr_lower(a: &Csr) -> Self {
        let hbw = a.bandwidth();
        let dim = a.nrows;
        let w = hbw + 1;
        let mut data = vec![0.0; dim * w];
        for i in 0..dim {
            let (cols, vals) = a.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                if c <= i {
                    data[i * w + (i - c)] = v;
                }
            }
        }
        BandMatrix { dim, hbw, data }
    }

    /// In-place banded Cholesky. Fails on a nonpositive pivot, which callers treat
    /// as "shift not inside the spectrum gap" and retry with a safer shift.
    pub fn cholesky_inplace(mut self) -> Result<BandChol> {
        let w = self.hbw + 1;
        for i in 0..self.dim {
            let lo = i.saturating_sub(self.hbw);
            for j in lo..=i {
                // dot over k in [max(lo, j-hbw), j): both rows store k at
                // offset (row - k), so the two slices run in lockstep.
                let klo = lo.max(j.saturating_sub(self.hbw));
                let mut s = self.data[i * w + (i - j)];
                for k in klo..j {
                    s -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                if j < i {
                    self.data[i * w + (i - j)] = s / self.data[j * w];
                } else {
                    if s <= 0.0 {
                        return Err(Error::SolverError(format!(
                            "band Cholesky pivot {s:.3e} at row {i}"
                        )));
                    }
                    self.data[i * w] = s.sqrt();
                }
            }
        }
        Ok(BandChol { dim: self.dim, hbw: self.hbw, data: self.data })
    }
}

pub struct BandChol {
    pub dim: usize,
    pub hbw: usize,
    data: Vec<f64>,
}

impl BandChol {
    /// Smallest and largest diagonal entry of the factor. A ratio near machine
    /// epsilon means the matrix was semidefinite and the factorization only
    /// survived by rounding luck; callers should reject it and reshift.
    pub fn pivot_range(&self) -> (f64, f64) {
        let w = self.hbw + 1;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..self.dim {
            let p = self.data[i * w];
            lo = lo.min(p);
            hi = hi.max(p);
        }
        (lo, hi)
    }

    /// Solves A x = b given A = L L^T.
    pub fn solve(&self, b: &[f64], x: &mut [f64]) {
        let w = self.hbw + 1;
        x.copy_from_slice(b);
        for i in 0..self.dim {
            let lo = i.saturating_sub(self.hbw);
            let mut s = x[i];
            for k in lo..i {
                s -= self.data[i * w + (i - k)] * x[k];
            }
            x[i] = s / self.data[i * w];
        }
        for ii in 0..self.dim {
            let i = self.dim - 1 - ii;
            let hi = (i + self.hbw).min(self.dim - 1);
            let mut s = x[i];
            for k in (i + 1)..=hi {
                s -= self.data[k * w + (k - i)] * x[k];
            }
            x[i] = s / self.data[i * w];
        }
    }
}

/// Kahan-compensated dot product; the final Rayleigh-quotient refinements need
/// every digit they can get when the operator scale is ~1e5 and the tolerance 1e-10.
pub fn dot_kahan(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let t = x * y - c;
        let u = s + t;
        c = (u - s) - t;
        s = u;
    }
    s
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Preconditioned conjugate gradients for symmetric positive semidefinite systems
/// whose right-hand side lies in the range. `project` (if given) is applied to the
/// iterate and residual each step to pin down the nullspace component, e.g. mean
/// removal for Neumann-type scalar problems.
pub fn pcg(
    apply_a: &dyn Fn(&[f64], &mut [f64]),
    precond: &dyn Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
    project: Option<&dyn Fn(&mut [f64])>,
) -> Result<(usize, f64)> {
    let n = b.len();
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ap = vec![0.0; n];
    if let Some(pr) = project {
        pr(x);
    }
    apply_a(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if let Some(pr) = project {
        pr(&mut r);
    }
    let bnorm = norm2(b).max(f64::MIN_POSITIVE);
    precond(&r, &mut z);
    p.copy_from_slice(&z);
    let mut rz = dot(&r, &z);
    let mut relres = norm2(&r) / bnorm;
    if relres <= tol {
        return Ok((0, relres));
    }
    for it in 1..=max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(Error::SolverError(format!(
                "cg: nonpositive curvature {pap:.3e} at iteration {it}"
            )));
        }
        let alpha = rz / pap;
        axpy(alpha, &p, x);
        axpy(-alpha, &ap, &mut r);
        if let Some(pr) = project {
            pr(x);
            pr(&mut r);
        }
        relres = norm2(&r) / bnorm;
        if relres <= tol {
            return Ok((it, relres));
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverError(format!(
        "cg failed to converge in {max_iter} iterations (relres {relres:.3e})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Csr {
        Csr::from_triplets(
            3,
            3,
            vec![(0, 0, 2.0), (0, 2, 1.0), (1, 1, 3.0), (2, 0, 1.0), (2, 2, 4.0), (0, 2, 0.5)],
        )
    }

    #[test]
    fn triplets_merge_and_matvec() {
        let a = small();
        assert_eq!(a.nnz(), 5);
        assert_eq!(a.get(0, 2), 1.5);
        let y = a.apply(&[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![2.0 + 4.5, 6.0, 1.0 + 12.0]);
    }

    #[test]
    fn transpose_matmul_add() {
        let a = small();
        let t = a.transpose();
        assert_eq!(t.get(2, 0), 1.5);
        assert_eq!(t.get(0, 2), 1.0);
        let ata = t.matmul(&a);
        assert!(ata.symmetry_defect() < 1e-15);
        // spot check one entry of A^T A against a dense computation
        let d = a.to_dense();
        let dd = d.transpose() * d;
        for i in 0..3 {
            for j in 0..3 {
                assert!((ata.get(i, j) - dd[(i, j)]).abs() < 1e-14);
            }
        }
        let s = a.add_scaled(&t, -1.0);
        assert!((s.get(0, 2) - 0.5).abs() < 1e-15);
        assert!((s.get(2, 0) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn block_diag_cholesky_roundtrip() {
        let mut m = BlockDiag::new(2, 2);
        m.block_mut(0).copy_from_slice(&[4.0, 1.0, 1.0, 3.0]);
        m.block_mut(1).copy_from_slice(&[2.0, 0.0, 0.0, 5.0]);
        let ch = m.cholesky().unwrap();
        let x = vec![1.0, -2.0, 0.5, 3.0];
        let mut y = m.apply(&x);
        ch.solve_inplace(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
        // L^T then back
        let mut z = x.clone();
        ch.mul_lt_inplace(&mut z);
        ch.solve_lt_inplace(&mut z);
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(m.min_eigenvalue() > 0.0);
    }

    #[test]
    fn band_cholesky_solves() {
        // 1D Dirichlet Laplacian, dim 20, bandwidth 1
        let n = 20;
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 2.0));
            if i + 1 < n {
                trip.push((i, i + 1, -1.0));
                trip.push((i + 1, i, -1.0));
            }
        }
        let a = Csr::from_triplets(n, n, trip);
        let band = BandMatrix::from_csr_lower(&a);
        assert_eq!(band.hbw, 1);
        let ch = band.cholesky_inplace().unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = vec![0.0; n];
        ch.solve(&b, &mut x);
        let r = a.apply(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
    }

    #[test]
    fn band_cholesky_rejects_indefinite() {
        let a = Csr::from_triplets(2, 2, vec![(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(BandMatrix::from_csr_lower(&a).cholesky_inplace().is_err());
    }

    #[test]
    fn cg_solves_spd() {
        let n = 30;
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 3.0 + (i as f64 * 0.1).cos()));
            if i + 1 < n {
                trip.push((i, i + 1, -1.0));
                trip.push((i + 1, i, -1.0));
            }
        }
        let a = Csr::from_triplets(n, n, trip);
        let b: Vec<f64> = (0..n).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let mut x = vec![0.0; n];
        let apply = |v: &[f64], out: &mut [f64]| a.matvec(v, out);
        let id = |v: &[f64], out: &mut [f64]| out.copy_from_slice(v);
        let (_, relres) = pcg(&apply, &id, &b, &mut x, 1e-12, 500, None).unwrap();
        assert!(relres <= 1e-12);
        let r = a.apply(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-10);
        }
    }

    #[test]
    fn kahan_dot_matches_naive_on_benign_data() {
        let a: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..100).map(|i| (i as f64).cos()).collect();
        assert!((dot_kahan(&a, &b) - dot(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn matrix_market_roundtrippable_header() {
        let a = small();
        let dir = std::env::temp_dir().join("projlab_mm_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.mtx");
        a.write_matrix_market(&p).unwrap();
        let s = std::fs::read_to_string(&p).unwrap();
        assert!(s.starts_with("%%MatrixMarket matrix coordinate real general"));
        assert!(s.lines().count() == 2 + a.nnz());
    }
}
