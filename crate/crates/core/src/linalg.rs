//! Dense kernels behind every Newton solve: modified Gram-Schmidt thin QR,
//! a block Cholesky solver for symmetric positive definite block tridiagonal
//! systems, and Sherman-Morrison-Woodbury low-rank updates of that solver.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a column is declared dependent.
pub const RANK_TOL: f64 = 1e-13;

/// Thin QR factors: `Q` is `d x p` with orthonormal columns, `R` is `p x p`
/// upper triangular with a positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinQr {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

/// Modified Gram-Schmidt, a single pass. Column order is preserved.
pub fn mgs_qr(a: &DMatrix<f64>) -> Result<ThinQr> {
    mgs_qr_with(a, false)
}

/// Modified Gram-Schmidt with an optional second orthogonalization pass for
/// badly conditioned inputs.
pub fn mgs_qr_with(a: &DMatrix<f64>, reorthogonalize: bool) -> Result<ThinQr> {
    let (d, p) = a.shape();
    if p > d {
        return Err(Error::RankDeficient { column: d });
    }
    let scale = a.norm();
    let mut q = a.clone();
    let mut r = DMatrix::zeros(p, p);
    let passes = if reorthogonalize { 2 } else { 1 };
    for j in 0..p {
        for _ in 0..passes {
            for i in 0..j {
                let (qi, mut qj) = q.columns_range_pair_mut(i, j);
                let rij = qi.dot(&qj);
                qj.axpy(-rij, &qi, 1.0);
                r[(i, j)] += rij;
            }
        }
        let mut col = q.column_mut(j);
        let norm = col.norm();
        if !(norm > RANK_TOL * scale) || !norm.is_finite() {
            return Err(Error::RankDeficient { column: j });
        }
        col /= norm;
        r[(j, j)] = norm;
    }
    Ok(ThinQr { q, r })
}

/// Symmetric block tridiagonal matrix with `n` square diagonal blocks of size
/// `m`. `upper[k]` is the block in row `k`, column `k + 1`; the block below the
/// diagonal is its transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    diag: Vec<DMatrix<f64>>,
    upper: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn new(diag: Vec<DMatrix<f64>>, upper: Vec<DMatrix<f64>>) -> Result<Self> {
        if diag.is_empty() {
            return Err(Error::InvalidInput("block tridiagonal matrix needs a block".into()));
        }
        if upper.len() + 1 != diag.len() {
            return Err(Error::LengthMismatch { expected: diag.len() - 1, found: upper.len() });
        }
        let m = diag[0].nrows();
        if diag.iter().chain(upper.iter()).any(|b| b.shape() != (m, m)) {
            return Err(Error::InvalidInput(format!("all blocks must be {m}x{m}")));
        }
        Ok(Self { diag, upper })
    }

    pub fn blocks(&self) -> usize {
        self.diag.len()
    }

    pub fn block_size(&self) -> usize {
        self.diag[0].nrows()
    }

    pub fn size(&self) -> usize {
        self.blocks() * self.block_size()
    }

    pub fn diag(&self) -> &[DMatrix<f64>] {
        &self.diag
    }

    pub fn upper(&self) -> &[DMatrix<f64>] {
        &self.upper
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.block_size();
        let mut a = DMatrix::zeros(self.size(), self.size());
        for (k, d) in self.diag.iter().enumerate() {
            a.view_mut((k * m, k * m), (m, m)).copy_from(d);
        }
        for (k, o) in self.upper.iter().enumerate() {
            a.view_mut((k * m, (k + 1) * m), (m, m)).copy_from(o);
            a.view_mut(((k + 1) * m, k * m), (m, m)).copy_from(&o.transpose());
        }
        a
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = self.block_size();
        let mut y = DVector::zeros(self.size());
        for k in 0..self.blocks() {
            let mut yk = &self.diag[k] * x.rows(k * m, m);
            if k + 1 < self.blocks() {
                yk += &self.upper[k] * x.rows((k + 1) * m, m);
            }
            if k > 0 {
                yk += self.upper[k - 1].tr_mul(&x.rows((k - 1) * m, m));
            }
            y.rows_mut(k * m, m).copy_from(&yk);
        }
        y
    }

    /// Block Cholesky factorization `M = L L^T` with `L` block lower
    /// bidiagonal. Fails with the index of the first block whose Schur
    /// complement is not positive definite.
    pub fn factor(&self) -> Result<BlockTridiagonalFactor> {
        let n = self.blocks();
        let mut chol: Vec<Cholesky<f64, Dyn>> = Vec::with_capacity(n);
        let mut sub: Vec<DMatrix<f64>> = Vec::with_capacity(n.saturating_sub(1));
        for k in 0..n {
            let block = match k {
                0 => self.diag[0].clone(),
                _ => &self.diag[k] - &sub[k - 1] * sub[k - 1].transpose(),
            };
            let c = Cholesky::new(block).ok_or(Error::NotPositiveDefinite { block: k })?;
            if k + 1 < n {
                // B_k = (L_k^{-1} O_k)^T is the block of L below L_k.
                let mut lo = self.upper[k].clone();
                c.l_dirty().solve_lower_triangular_mut(&mut lo);
                sub.push(lo.transpose());
            }
            chol.push(c);
        }
        Ok(BlockTridiagonalFactor { chol, sub, m: self.block_size() })
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.factor()?.solve(b))
    }
}

/// Reusable factorization of a [`BlockTridiagonal`] matrix.
#[derive(Debug, Clone)]
pub struct BlockTridiagonalFactor {
    chol: Vec<Cholesky<f64, Dyn>>,
    sub: Vec<DMatrix<f64>>,
    m: usize,
}

impl BlockTridiagonalFactor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        let x = self.solve_matrix(&rhs);
        DVector::from_column_slice(x.as_slice())
    }

    /// Solves for several right-hand sides at once.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = (self.chol.len(), self.m);
        assert_eq!(b.nrows(), n * m, "right-hand side has the wrong length");
        let mut y = b.clone();
        // Forward: L_k y_k = b_k - B_{k-1} y_{k-1}
        for k in 0..n {
            if k > 0 {
                let prev = y.rows((k - 1) * m, m).clone_owned();
                let upd = &self.sub[k - 1] * prev;
                let mut yk = y.rows_mut(k * m, m);
                yk -= upd;
            }
            let mut yk = y.rows(k * m, m).clone_owned();
            self.chol[k].l_dirty().solve_lower_triangular_mut(&mut yk);
            y.rows_mut(k * m, m).copy_from(&yk);
        }
        // Backward: L_k^T x_k = y_k - B_k^T x_{k+1}
        for k in (0..n).rev() {
            if k + 1 < n {
                let next = y.rows((k + 1) * m, m).clone_owned();
                let upd = self.sub[k].tr_mul(&next);
                let mut yk = y.rows_mut(k * m, m);
                yk -= upd;
            }
            let mut yk = y.rows(k * m, m).clone_owned();
            self.chol[k].l_dirty().tr_solve_lower_triangular_mut(&mut yk);
            y.rows_mut(k * m, m).copy_from(&yk);
        }
        y
    }
}

/// Solves `(M + U U^T) x = b` from a factorization of `M` using the
/// Sherman-Morrison-Woodbury identity.
pub fn smw_solve(m: &BlockTridiagonal, u: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let factor = m.factor()?;
    smw_solve_factored(&factor, u, b)
}

pub fn smw_solve_factored(
    factor: &BlockTridiagonalFactor,
    u: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<DVector<f64>> {
    let q = u.ncols();
    let z = factor.solve(b);
    if q == 0 {
        return Ok(z);
    }
    let w = factor.solve_matrix(u);
    let cap = DMatrix::identity(q, q) + u.tr_mul(&w);
    let lu = cap.lu();
    let rhs = u.tr_mul(&z);
    let c = lu.solve(&rhs).ok_or(Error::SingularUpdate)?;
    if !c.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularUpdate);
    }
    Ok(z - w * c)
}
