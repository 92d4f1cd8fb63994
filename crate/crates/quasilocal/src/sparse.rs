//! Compressed sparse row matrices and the linear solver facade.
//!
//! Everything the crate assembles is symmetric positive definite (fine-scale
//! stiffness blocks, patch stiffness, Schur complements are handled densely),
//! so the facade exposes exactly one sparse factorization: Cholesky. With the
//! `direct` feature (default) it is backed by faer's supernodal LLT, split
//! into a reusable symbolic analysis ([`SpdPattern`]) and per-value numeric
//! factorizations ([`SpdFactor`]) — the corrector driver re-factorizes the
//! same pattern for every coefficient sample. Without the feature, a
//! Jacobi-preconditioned conjugate gradient stands in (slower; used for
//! builds without native dependencies, e.g. WebAssembly).
//!
//! Determinism: faer is pinned to sequential execution the first time a
//! factorization is created, so solve results are bitwise reproducible and
//! independent of any thread-pool configuration.

use nalgebra::DMatrix;

use crate::{Error, Result};

/// A CSR matrix with sorted, duplicate-free column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from coordinate triplets; duplicate positions are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i},{j}) out of {nrows}×{ncols}");
        }
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_unstable_by_key(|&t| (triplets[t].0, triplets[t].1));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut last = None;
        for &t in &order {
            let (i, j, v) = triplets[t];
            if last == Some((i, j)) {
                // Same position as the previous entry: fold.
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix { nrows, ncols, row_ptr, col_idx, values }
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

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Offset of row `i`'s first entry within the value array; together with
    /// [`Self::row`] this lets callers precompute value slots for repeated
    /// refills of a fixed pattern.
    pub fn row_offset(&self, i: usize) -> usize {
        self.row_ptr[i]
    }

    /// Mutable access to the stored values (the pattern is fixed).
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    /// `y = A x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let mut acc = 0.0;
            for (&j, &v) in cols.iter().zip(vals) {
                acc += v * x[j];
            }
            y[i] = acc;
        }
        y
    }

    /// `y = Aᵀ x` without materializing the transpose.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                y[j] += v * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                m[(i, j)] += v;
            }
        }
        m
    }

    /// Largest absolute deviation from symmetry (∞ for non-square).
    pub fn symmetry_error(&self) -> f64 {
        if self.nrows != self.ncols {
            return f64::INFINITY;
        }
        let mut err = 0.0f64;
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                err = err.max((v - self.get(j, i)).abs());
            }
        }
        err
    }
}

/// Jacobi-preconditioned conjugate gradients for SPD systems. Converges to
/// `‖b − Ax‖ ≤ tol_rel · ‖b‖`; errors with iteration diagnostics otherwise.
pub fn cg_solve(
    a: &SparseMatrix,
    b: &[f64],
    tol_rel: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    assert_eq!(a.nrows(), a.ncols());
    assert_eq!(b.len(), a.nrows());
    let n = b.len();
    let inv_diag: Vec<f64> = (0..n)
        .map(|i| {
            let d = a.get(i, i);
            if d <= 0.0 {
                return f64::NAN;
            }
            1.0 / d
        })
        .collect();
    if inv_diag.iter().any(|d| !d.is_finite()) {
        return Err(Error::Solve("matrix has a nonpositive diagonal entry".into()));
    }

    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm_b == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let target = tol_rel * norm_b;

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();

    for iter in 0..max_iter {
        let ap = a.matvec(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::Solve(format!(
                "conjugate gradients broke down at iteration {iter} (pᵀAp = {pap}); matrix is not positive definite"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let norm_r = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm_r <= target {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let norm_r = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    Err(Error::Solve(format!(
        "conjugate gradients did not converge in {max_iter} iterations (residual {:.3e}, target {:.3e})",
        norm_r, target
    )))
}

#[cfg(feature = "direct")]
mod direct {
    use super::*;
    use faer::linalg::solvers::Solve;
    use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
    use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
    use faer::{Mat, Side};

    /// Pin faer to sequential execution once, keeping factorizations
    /// bitwise reproducible regardless of thread pools.
    fn ensure_sequential() {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
    }

    /// Symbolic Cholesky analysis of a symmetric sparsity pattern, reusable
    /// across matrices with identical structure.
    #[derive(Debug, Clone)]
    pub struct SpdPattern {
        symbolic: SymbolicLlt<usize>,
    }

    impl SpdPattern {
        pub fn new(a: &SparseMatrix) -> Result<SpdPattern> {
            ensure_sequential();
            debug_assert!(
                a.symmetry_error() <= 1e-10 * (1.0 + a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))),
                "SPD factorization requires a symmetric matrix"
            );
            // A symmetric CSR matrix reads verbatim as CSC: row pointers
            // become column pointers, column indices become row indices.
            let sym = SymbolicSparseColMatRef::new_checked(
                a.nrows,
                a.ncols,
                &a.row_ptr,
                None,
                &a.col_idx,
            );
            let symbolic = SymbolicLlt::try_new(sym, Side::Lower)
                .map_err(|e| Error::Solve(format!("symbolic Cholesky failed: {e:?}")))?;
            Ok(SpdPattern { symbolic })
        }

        /// Numeric factorization of a matrix with this pattern.
        pub fn factor(&self, a: &SparseMatrix) -> Result<SpdFactor> {
            ensure_sequential();
            let sym = SymbolicSparseColMatRef::new_checked(
                a.nrows,
                a.ncols,
                &a.row_ptr,
                None,
                &a.col_idx,
            );
            let mat = SparseColMatRef::new(sym, &a.values);
            let llt = Llt::try_new_with_symbolic(self.symbolic.clone(), mat, Side::Lower)
                .map_err(|e| {
                    Error::Solve(format!("matrix is not positive definite (Cholesky: {e:?})"))
                })?;
            Ok(SpdFactor { llt, n: a.nrows })
        }
    }

    /// A numeric Cholesky factorization ready to solve.
    #[derive(Debug, Clone)]
    pub struct SpdFactor {
        llt: Llt<usize, f64>,
        n: usize,
    }

    impl SpdFactor {
        pub fn new(a: &SparseMatrix) -> Result<SpdFactor> {
            SpdPattern::new(a)?.factor(a)
        }

        pub fn solve(&self, b: &[f64]) -> Vec<f64> {
            assert_eq!(b.len(), self.n);
            let rhs = Mat::from_fn(self.n, 1, |i, _| b[i]);
            let x = self.llt.solve(&rhs);
            (0..self.n).map(|i| x[(i, 0)]).collect()
        }

        /// Solve for every column of `b` at once.
        pub fn solve_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
            assert_eq!(b.nrows(), self.n);
            let rhs = Mat::from_fn(b.nrows(), b.ncols(), |i, j| b[(i, j)]);
            let x = self.llt.solve(&rhs);
            DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| x[(i, j)])
        }
    }
}

#[cfg(feature = "direct")]
pub use direct::{SpdFactor, SpdPattern};

#[cfg(not(feature = "direct"))]
mod iterative {
    use super::*;

    const CG_TOL: f64 = 1e-12;

    /// Without the `direct` feature the "pattern" carries nothing; analysis
    /// is free and every solve runs conjugate gradients.
    #[derive(Debug, Clone)]
    pub struct SpdPattern;

    impl SpdPattern {
        pub fn new(a: &SparseMatrix) -> Result<SpdPattern> {
            if a.nrows() != a.ncols() {
                return Err(Error::Solve("matrix must be square".into()));
            }
            // A positive diagonal is necessary for positive definiteness;
            // screening it here rejects sign errors eagerly, like a direct
            // factorization would. Subtler indefiniteness still surfaces as
            // a breakdown during conjugate gradients.
            for i in 0..a.nrows() {
                let (cols, vals) = a.row(i);
                let diag = cols
                    .iter()
                    .position(|&c| c == i)
                    .map(|p| vals[p])
                    .unwrap_or(0.0);
                if diag <= 0.0 {
                    return Err(Error::Solve(format!(
                        "matrix is not positive definite: diagonal entry {i} is {diag}"
                    )));
                }
            }
            Ok(SpdPattern)
        }

        pub fn factor(&self, a: &SparseMatrix) -> Result<SpdFactor> {
            Ok(SpdFactor { a: a.clone() })
        }
    }

    /// CG-backed stand-in for a factorization: stores the matrix.
    #[derive(Debug, Clone)]
    pub struct SpdFactor {
        a: SparseMatrix,
    }

    impl SpdFactor {
        pub fn new(a: &SparseMatrix) -> Result<SpdFactor> {
            SpdPattern::new(a)?.factor(a)
        }

        pub fn solve(&self, b: &[f64]) -> Vec<f64> {
            cg_solve(&self.a, b, CG_TOL, 40 * self.a.nrows().max(100))
                .expect("conjugate gradients failed on an SPD system")
        }

        pub fn solve_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
            let mut x = DMatrix::zeros(b.nrows(), b.ncols());
            for j in 0..b.ncols() {
                let col: Vec<f64> = b.column(j).iter().copied().collect();
                let sol = self.solve(&col);
                for i in 0..b.nrows() {
                    x[(i, j)] = sol[i];
                }
            }
            x
        }
    }
}

#[cfg(not(feature = "direct"))]
pub use iterative::{SpdFactor, SpdPattern};
