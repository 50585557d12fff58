//! Sparse symmetric positive definite systems: lower-triangle CSC storage and
//! a supernodal Cholesky factorization (backed by `faer`).

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, LltRef, SymbolicCholesky, SymmetricOrdering};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};

use crate::error::{Error, Result};

/// Relative residual every solve must reach.
pub const RESIDUAL_TOLERANCE: f64 = 1e-9;
const REFINE_TARGET: f64 = 1e-12;
const MAX_REFINEMENTS: usize = 4;

/// Lower-triangular (row >= col) sparsity pattern in compressed-column form,
/// rows sorted within each column.
#[derive(Debug)]
pub struct SymPattern {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
}

impl SymPattern {
    pub fn new(n: usize, col_ptr: Vec<usize>, row_idx: Vec<usize>) -> Result<Self> {
        if col_ptr.len() != n + 1 || *col_ptr.last().unwrap() != row_idx.len() {
            return Err(Error::Solver("inconsistent sparsity pattern".into()));
        }
        for c in 0..n {
            let rows = &row_idx[col_ptr[c]..col_ptr[c + 1]];
            if rows.first() != Some(&c) || rows.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Solver(format!("column {c} lacks a sorted lower pattern")));
            }
            if rows.last().is_some_and(|&r| r >= n) {
                return Err(Error::Solver(format!("row index out of range in column {c}")));
            }
        }
        Ok(SymPattern { n, col_ptr, row_idx })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Storage slot of entry `(row, col)`; requires `row >= col`.
    pub fn slot(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.col_ptr[col];
        let rows = &self.row_idx[lo..self.col_ptr[col + 1]];
        rows.binary_search(&row).ok().map(|k| lo + k)
    }

    /// `y = A x` for the symmetric matrix whose lower triangle is `values`.
    pub fn sym_matvec(&self, values: &[f64], x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..self.n {
            let xc = x[c];
            let mut acc = 0.0;
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                let r = self.row_idx[p];
                let v = values[p];
                if r == c {
                    acc += v * xc;
                } else {
                    acc += v * x[r];
                    y[r] += v * xc;
                }
            }
            y[c] += acc;
        }
    }
}

/// Fill-reducing ordering plus symbolic factor, reusable for any values on
/// the same pattern.
pub struct SymbolicFactor {
    pattern: Arc<SymPattern>,
    chol: SymbolicCholesky<usize>,
}

impl std::fmt::Debug for SymbolicFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymbolicFactor").field("n", &self.pattern.n).field("factor_nnz", &self.chol.len_val()).finish()
    }
}

impl SymbolicFactor {
    pub fn new(pattern: Arc<SymPattern>) -> Result<Self> {
        let sym = SymbolicSparseColMatRef::new_checked(pattern.n, pattern.n, &pattern.col_ptr, None, &pattern.row_idx);
        let chol = factorize_symbolic_cholesky(sym, Side::Lower, SymmetricOrdering::Amd, Default::default())
            .map_err(|e| Error::Solver(format!("symbolic factorization: {e:?}")))?;
        Ok(SymbolicFactor { pattern, chol })
    }

    pub fn pattern(&self) -> &Arc<SymPattern> {
        &self.pattern
    }

    /// Numeric factorization of the matrix with lower-triangle `values`.
    pub fn factorize(&self, values: &[f64]) -> Result<Cholesky<'_>> {
        let p = &self.pattern;
        assert_eq!(values.len(), p.nnz());
        let sym = SymbolicSparseColMatRef::new_checked(p.n, p.n, &p.col_ptr, None, &p.row_idx);
        let mat = SparseColMatRef::new(sym, values);
        let mut l = vec![0.0; self.chol.len_val()];
        let mut buf = MemBuffer::new(self.chol.factorize_numeric_llt_scratch::<f64>(Par::Seq, Default::default()));
        self.chol
            .factorize_numeric_llt(
                &mut l,
                mat,
                Side::Lower,
                Default::default(),
                Par::Seq,
                MemStack::new(&mut buf),
                Default::default(),
            )
            .map_err(|e| Error::Solver(format!("matrix is not positive definite: {e:?}")))?;
        Ok(Cholesky { symbolic: self, l })
    }
}

/// Numeric Cholesky factor bound to its symbolic structure.
pub struct Cholesky<'a> {
    symbolic: &'a SymbolicFactor,
    l: Vec<f64>,
}

impl Cholesky<'_> {
    /// Overwrites the column-major `rhs` (n x ncols) with the solution.
    pub fn solve_in_place(&self, rhs: &mut [f64], ncols: usize) {
        let n = self.symbolic.pattern.n;
        assert_eq!(rhs.len(), n * ncols);
        if n == 0 || ncols == 0 {
            return;
        }
        let llt = LltRef::new(&self.symbolic.chol, &self.l);
        let mut buf = MemBuffer::new(self.symbolic.chol.solve_in_place_scratch::<f64>(ncols, Par::Seq));
        llt.solve_in_place_with_conj(
            Conj::No,
            MatMut::from_column_major_slice_mut(rhs, n, ncols),
            Par::Seq,
            MemStack::new(&mut buf),
        );
    }
}

/// Solves `A X = B` for column-major `rhs`, refining iteratively until every
/// column's relative residual is below [`RESIDUAL_TOLERANCE`]. Returns the
/// worst relative residual.
pub fn solve_spd(symbolic: &SymbolicFactor, values: &[f64], rhs: &mut [f64], ncols: usize) -> Result<f64> {
    solve_spd_to(symbolic, values, rhs, ncols, RESIDUAL_TOLERANCE)
}

/// As [`solve_spd`] with an explicit residual tolerance.
pub fn solve_spd_to(
    symbolic: &SymbolicFactor,
    values: &[f64],
    rhs: &mut [f64],
    ncols: usize,
    tolerance: f64,
) -> Result<f64> {
    let factor = symbolic.factorize(values)?;
    solve_with_factor(&factor, values, rhs, ncols, tolerance)
}

pub fn solve_with_factor(
    factor: &Cholesky<'_>,
    values: &[f64],
    rhs: &mut [f64],
    ncols: usize,
    tolerance: f64,
) -> Result<f64> {
    let pattern = &factor.symbolic.pattern;
    let n = pattern.n;
    let b = rhs.to_vec();
    factor.solve_in_place(rhs, ncols);
    let mut r = vec![0.0; n * ncols];
    let mut ax = vec![0.0; n];
    let mut worst = 0.0;
    for step in 0..=MAX_REFINEMENTS {
        worst = 0.0f64;
        for c in 0..ncols {
            let x = &rhs[c * n..(c + 1) * n];
            pattern.sym_matvec(values, x, &mut ax);
            let bc = &b[c * n..(c + 1) * n];
            let rc = &mut r[c * n..(c + 1) * n];
            let mut rn = 0.0;
            let mut bn = 0.0;
            for i in 0..n {
                rc[i] = bc[i] - ax[i];
                rn += rc[i] * rc[i];
                bn += bc[i] * bc[i];
            }
            let rel = if bn > 0.0 { (rn / bn).sqrt() } else { rn.sqrt() };
            worst = worst.max(rel);
        }
        if !worst.is_finite() {
            return Err(Error::Solver("non-finite residual".into()));
        }
        if worst <= REFINE_TARGET || step == MAX_REFINEMENTS {
            break;
        }
        factor.solve_in_place(&mut r, ncols);
        for (x, d) in rhs.iter_mut().zip(&r) {
            *x += d;
        }
    }
    if worst > tolerance {
        return Err(Error::Solver(format!("relative residual {worst:e} above {tolerance:e}")));
    }
    Ok(worst)
}
