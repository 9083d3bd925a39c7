//! Dense and sparse matrix primitives.
//!
//! Dense matrices are `nalgebra` column-major matrices of `f64`; samples are
//! stored as columns so that per-sample access is contiguous. The heavy
//! kernels (GEMM, QR, thin SVD) are delegated to `faer`, always run
//! sequentially so results are reproducible bit for bit.

mod sparse;
mod svd;

use faer::linalg::matmul::matmul as faer_matmul;
use faer::{Accum, MatMut, MatRef, Par};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use sparse::SparseMatrix;
pub use svd::{
    numerical_rank, retract_to_stiefel, thin_svd, thin_svd_untrimmed, truncated_svd, truncated_svd_with, RandomizedSvd, SvdFactors,
    RANK_TOLERANCE,
};

pub type DenseMatrix = DMatrix<f64>;
pub type DenseVector = DVector<f64>;

/// A data matrix that is either dense or compressed sparse column.
#[derive(Debug, Clone, PartialEq)]
pub enum DataMatrix {
    Dense(DenseMatrix),
    Sparse(SparseMatrix),
}

impl DataMatrix {
    pub fn nrows(&self) -> usize {
        match self {
            DataMatrix::Dense(m) => m.nrows(),
            DataMatrix::Sparse(m) => m.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            DataMatrix::Dense(m) => m.ncols(),
            DataMatrix::Sparse(m) => m.ncols(),
        }
    }

    /// `self · b`
    pub fn mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        match self {
            DataMatrix::Dense(m) => matmul(m, b),
            DataMatrix::Sparse(m) => m.mul_dense(b),
        }
    }

    /// `selfᵀ · b`
    pub fn tr_mul_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        match self {
            DataMatrix::Dense(m) => matmul_tn(m, b),
            DataMatrix::Sparse(m) => m.tr_mul_dense(b),
        }
    }

    /// `a · self`
    pub fn premul_dense(&self, a: &DenseMatrix) -> DenseMatrix {
        match self {
            DataMatrix::Dense(m) => matmul(a, m),
            DataMatrix::Sparse(m) => m.premul_dense(a),
        }
    }

    pub fn column(&self, j: usize) -> DenseVector {
        match self {
            DataMatrix::Dense(m) => m.column(j).into_owned(),
            DataMatrix::Sparse(m) => m.column_dense(j),
        }
    }

    /// Gathers the given columns into a dense `nrows × indices.len()` matrix.
    pub fn select_columns(&self, indices: &[usize]) -> DenseMatrix {
        match self {
            DataMatrix::Dense(m) => m.select_columns(indices),
            DataMatrix::Sparse(m) => m.select_columns_dense(indices),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            DataMatrix::Dense(m) => m.clone(),
            DataMatrix::Sparse(m) => m.to_dense(),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            DataMatrix::Dense(m) => all_finite(m),
            DataMatrix::Sparse(m) => m.values().iter().all(|v| v.is_finite()),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        match self {
            DataMatrix::Dense(m) => m.norm(),
            DataMatrix::Sparse(m) => m.values().iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        match self {
            DataMatrix::Dense(m) => m.column(j).norm(),
            DataMatrix::Sparse(m) => m.column_norm(j),
        }
    }

    pub fn scale_column(&mut self, j: usize, factor: f64) {
        match self {
            DataMatrix::Dense(m) => m.column_mut(j).scale_mut(factor),
            DataMatrix::Sparse(m) => m.scale_column(j, factor),
        }
    }
}

impl From<DenseMatrix> for DataMatrix {
    fn from(m: DenseMatrix) -> Self {
        DataMatrix::Dense(m)
    }
}

impl From<SparseMatrix> for DataMatrix {
    fn from(m: SparseMatrix) -> Self {
        DataMatrix::Sparse(m)
    }
}

pub(crate) fn as_faer(a: &DenseMatrix) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(a.as_slice(), a.nrows(), a.ncols())
}

pub(crate) fn as_faer_mut(a: &mut DenseMatrix) -> MatMut<'_, f64> {
    let (r, c) = a.shape();
    MatMut::from_column_major_slice_mut(a.as_mut_slice(), r, c)
}

pub(crate) fn from_faer(m: MatRef<'_, f64>) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.nrows(), m.ncols());
    for j in 0..m.ncols() {
        let col = m.col(j);
        for (dst, i) in out.column_mut(j).iter_mut().zip(0..m.nrows()) {
            *dst = col[i];
        }
    }
    out
}

/// `a · b`
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.ncols(), b.nrows(), "matmul: inner dimensions differ");
    let mut out = DenseMatrix::zeros(a.nrows(), b.ncols());
    faer_matmul(
        as_faer_mut(&mut out),
        Accum::Replace,
        as_faer(a),
        as_faer(b),
        1.0,
        Par::Seq,
    );
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.nrows(), b.nrows(), "matmul_tn: inner dimensions differ");
    let mut out = DenseMatrix::zeros(a.ncols(), b.ncols());
    faer_matmul(
        as_faer_mut(&mut out),
        Accum::Replace,
        as_faer(a).transpose(),
        as_faer(b),
        1.0,
        Par::Seq,
    );
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.ncols(), b.ncols(), "matmul_nt: inner dimensions differ");
    let mut out = DenseMatrix::zeros(a.nrows(), b.nrows());
    faer_matmul(
        as_faer_mut(&mut out),
        Accum::Replace,
        as_faer(a),
        as_faer(b).transpose(),
        1.0,
        Par::Seq,
    );
    out
}

/// Orthonormal basis of the column space of a tall matrix (thin Householder Q).
pub fn orthonormal_basis(a: &DenseMatrix) -> DenseMatrix {
    let qr = as_faer(a).qr();
    from_faer(qr.compute_thin_Q().as_ref())
}

/// Thin QR orthonormalization with column signs fixed so that `diag(R) ≥ 0`.
pub fn orthonormalize_columns(a: &DenseMatrix) -> DenseMatrix {
    let qr = a.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `‖qᵀq − I‖_F`
pub fn orthonormality_error(q: &DenseMatrix) -> f64 {
    let mut gram = matmul_tn(q, q);
    for i in 0..gram.nrows() {
        gram[(i, i)] -= 1.0;
    }
    gram.norm()
}

pub fn all_finite(m: &DenseMatrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub(crate) fn ensure_finite(m: &DenseMatrix, what: &str) -> Result<()> {
    if all_finite(m) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} contains NaN or infinite entries")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix_strategy(r: usize, c: usize) -> impl Strategy<Value = DenseMatrix> {
        prop::collection::vec(-10.0f64..10.0, r * c)
            .prop_map(move |v| DenseMatrix::from_vec(r, c, v))
    }

    #[test]
    fn products_match_nalgebra() {
        let a = DenseMatrix::from_fn(7, 4, |i, j| (i as f64 + 1.0) * 0.3 - j as f64);
        let b = DenseMatrix::from_fn(4, 5, |i, j| (i * j) as f64 * 0.1 + 1.0);
        let c = DenseMatrix::from_fn(7, 5, |i, j| i as f64 - 0.5 * j as f64);
        assert!((matmul(&a, &b) - &a * &b).norm() < 1e-12);
        assert!((matmul_tn(&a, &c) - a.transpose() * &c).norm() < 1e-12);
        let d = DenseMatrix::from_fn(3, 4, |i, j| (i + 2 * j) as f64 * 0.25);
        assert!((matmul_nt(&a, &d) - &a * d.transpose()).norm() < 1e-12);
    }

    #[test]
    fn orthonormalized_columns_have_nonnegative_r_diagonal() {
        let a = DenseMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let q = orthonormalize_columns(&a);
        assert!(orthonormality_error(&q) < 1e-12);
        let r = q.transpose() * &a;
        for j in 0..3 {
            assert!(r[(j, j)] >= 0.0);
        }
        let basis = orthonormal_basis(&a);
        assert!(orthonormality_error(&basis) < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn sparse_dense_products_agree_with_densified(
            a in matrix_strategy(50, 50),
            b in matrix_strategy(50, 3),
            mask in prop::collection::vec(0u8..4, 2500),
        ) {
            // Thin out a to roughly one quarter density.
            let mut masked = a.clone();
            for (v, m) in masked.iter_mut().zip(mask.iter()) {
                if *m != 0 {
                    *v = 0.0;
                }
            }
            let sparse = SparseMatrix::from_dense(&masked);
            let x = DataMatrix::Sparse(sparse);
            prop_assert!((x.mul_dense(&b) - &masked * &b).norm() < 1e-12);
            prop_assert!((x.tr_mul_dense(&b) - masked.transpose() * &b).norm() < 1e-12);
            let bt = b.transpose();
            prop_assert!((x.premul_dense(&bt) - &bt * &masked).norm() < 1e-12);
        }
    }
}
