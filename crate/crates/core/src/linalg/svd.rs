use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    as_faer, ensure_finite, from_faer, matmul, matmul_nt, orthonormal_basis, DataMatrix,
    DenseMatrix, DenseVector,
};
use crate::error::{Error, Result};

/// Singular values below `RANK_TOLERANCE · σ₁` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Truncated factors `x ≈ u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    /// Left singular vectors, `rows × r`.
    pub u: DenseMatrix,
    /// Positive singular values in non-increasing order.
    pub sigma: DenseVector,
    /// Right singular vectors, `cols × r`.
    pub v: DenseMatrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        matmul_nt(&us, &self.v)
    }

    /// Keeps the leading `r` triples.
    pub fn truncate(self, r: usize) -> SvdFactors {
        if r >= self.rank() {
            return self;
        }
        SvdFactors {
            u: self.u.columns(0, r).into_owned(),
            sigma: self.sigma.rows(0, r).into_owned(),
            v: self.v.columns(0, r).into_owned(),
        }
    }

    fn numerical_rank(&self) -> usize {
        let Some(&top) = self.sigma.as_slice().first() else {
            return 0;
        };
        if top <= 0.0 {
            return 0;
        }
        self.sigma
            .iter()
            .take_while(|&&s| s > RANK_TOLERANCE * top)
            .count()
    }
}

/// Untrimmed thin SVD straight from the backend.
fn raw_thin_svd(a: &DenseMatrix) -> Result<SvdFactors> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(SvdFactors {
            u: DenseMatrix::zeros(a.nrows(), 0),
            sigma: DenseVector::zeros(0),
            v: DenseMatrix::zeros(a.ncols(), 0),
        });
    }
    let svd = as_faer(a)
        .thin_svd()
        .map_err(|e| Error::Backend(format!("thin SVD did not converge: {e:?}")))?;
    let s = svd.S().column_vector();
    let sigma = DenseVector::from_iterator(s.nrows(), (0..s.nrows()).map(|i| s[i]));
    Ok(SvdFactors {
        u: from_faer(svd.U()),
        sigma,
        v: from_faer(svd.V()),
    })
}

/// Thin SVD with zero singular values trimmed (see [`RANK_TOLERANCE`]).
pub fn thin_svd(a: &DenseMatrix) -> Result<SvdFactors> {
    ensure_finite(a, "thin_svd input")?;
    let full = raw_thin_svd(a)?;
    let r = full.numerical_rank();
    Ok(full.truncate(r))
}

/// Thin SVD keeping all `min(rows, cols)` triples, zero singular values included.
pub fn thin_svd_untrimmed(a: &DenseMatrix) -> Result<SvdFactors> {
    ensure_finite(a, "thin_svd input")?;
    raw_thin_svd(a)
}

/// Number of singular values above `RANK_TOLERANCE · σ₁`.
pub fn numerical_rank(svd: &SvdFactors) -> usize {
    svd.numerical_rank()
}

/// Parameters of the randomized range finder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomizedSvd {
    pub oversampling: usize,
    pub power_iterations: usize,
}

impl Default for RandomizedSvd {
    fn default() -> Self {
        RandomizedSvd {
            oversampling: 10,
            power_iterations: 2,
        }
    }
}

/// Rank-capped SVD of a (possibly sparse) data matrix.
///
/// Returns `r = min(numerical rank, r_max)` factors.
pub fn truncated_svd(x: &DataMatrix, r_max: usize, seed: u64) -> Result<SvdFactors> {
    truncated_svd_with(x, r_max, seed, RandomizedSvd::default())
}

pub fn truncated_svd_with(
    x: &DataMatrix,
    r_max: usize,
    seed: u64,
    params: RandomizedSvd,
) -> Result<SvdFactors> {
    if r_max == 0 {
        return Err(Error::InvalidInput("r_max must be at least 1".into()));
    }
    if !x.is_finite() {
        return Err(Error::InvalidInput("data matrix contains NaN or infinite entries".into()));
    }
    let (rows, cols) = (x.nrows(), x.ncols());
    if rows == 0 || cols == 0 || x.frobenius_norm() == 0.0 {
        return Err(Error::RankZero);
    }
    let width = (r_max + params.oversampling).min(rows).min(cols);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DenseMatrix::from_fn(cols, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = orthonormal_basis(&x.mul_dense(&omega));
    drop(omega);
    for _ in 0..params.power_iterations {
        let z = orthonormal_basis(&x.tr_mul_dense(&q));
        q = orthonormal_basis(&x.mul_dense(&z));
    }

    // xᵀq = (qᵀx)ᵀ = Ub S Vbᵀ, so x ≈ q·Vb · S · Ubᵀ.
    let projected_t = x.tr_mul_dense(&q);
    let small = raw_thin_svd(&projected_t)?;
    drop(projected_t);
    let factors = SvdFactors {
        u: matmul(&q, &small.v),
        sigma: small.sigma,
        v: small.u,
    };
    let r = factors.numerical_rank().min(r_max);
    if r == 0 {
        return Err(Error::RankZero);
    }
    Ok(factors.truncate(r))
}

/// Nearest point on the Stiefel manifold: all singular values set to one.
pub fn retract_to_stiefel(a: &DenseMatrix) -> Result<DenseMatrix> {
    ensure_finite(a, "retraction input")?;
    let (r, d) = a.shape();
    if r < d {
        return Err(Error::InvalidInput(format!(
            "cannot retract a {r}×{d} matrix onto St({d}, {r})"
        )));
    }
    let svd = raw_thin_svd(a)?;
    let rank = svd.numerical_rank();
    if rank < d {
        return Err(Error::RankDeficient { rank, required: d });
    }
    Ok(matmul_nt(&svd.u, &svd.v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_error, SparseMatrix};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let svd = thin_svd(&DenseMatrix::identity(3, 3)).unwrap();
        assert_eq!(svd.rank(), 3);
        for s in svd.sigma.iter() {
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_singular_values_are_trimmed() {
        let a = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![3.0, 0.0, 0.0]));
        let svd = thin_svd(&a).unwrap();
        assert_eq!(svd.rank(), 1);
        assert!((svd.sigma[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn low_rank_product_is_reconstructed() {
        let f = random_matrix(8, 3, 1);
        let g = random_matrix(5, 3, 2);
        let a = &f * g.transpose();
        let svd = thin_svd(&a).unwrap();
        assert_eq!(svd.rank(), 3);
        assert!((svd.reconstruct() - &a).norm() < 1e-10 * a.norm());
        assert!(orthonormality_error(&svd.u) < 1e-8);
        assert!(orthonormality_error(&svd.v) < 1e-8);
        assert!(svd.sigma.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn thin_svd_rejects_non_finite() {
        let mut a = DenseMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&a), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn truncated_svd_finds_exact_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = DenseMatrix::zeros(50, 40);
        for _ in 0..2 {
            let a = DenseVector::from_fn(50, |_, _| rng.random_range(-1.0..1.0));
            let b = DenseVector::from_fn(40, |_, _| rng.random_range(-1.0..1.0));
            x += &a * b.transpose();
        }
        let svd = truncated_svd(&DataMatrix::Dense(x.clone()), 10, 3).unwrap();
        assert_eq!(svd.rank(), 2);
        assert!((svd.reconstruct() - &x).norm() < 1e-8 * x.norm());
    }

    #[test]
    fn truncated_svd_caps_rank() {
        let x = DataMatrix::Dense(DenseMatrix::identity(5, 5));
        let svd = truncated_svd(&x, 3, 0).unwrap();
        assert_eq!(svd.rank(), 3);
        for s in svd.sigma.iter() {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn truncated_svd_of_sparse_input_matches_dense() {
        let mut dense = random_matrix(30, 20, 11);
        for (k, v) in dense.iter_mut().enumerate() {
            if k % 3 != 0 {
                *v = 0.0;
            }
        }
        let sparse = DataMatrix::Sparse(SparseMatrix::from_dense(&dense));
        let a = truncated_svd(&sparse, 50, 5).unwrap();
        let b = truncated_svd(&DataMatrix::Dense(dense.clone()), 50, 5).unwrap();
        assert_eq!(a.rank(), b.rank());
        assert!((&a.sigma - &b.sigma).norm() < 1e-10);
        assert!((a.reconstruct() - dense).norm() < 1e-10);
    }

    #[test]
    fn truncated_svd_is_reproducible() {
        let x = DataMatrix::Dense(random_matrix(40, 60, 9));
        let a = truncated_svd(&x, 12, 42).unwrap();
        let b = truncated_svd(&x, 12, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_matrix_has_rank_zero() {
        let x = DataMatrix::Dense(DenseMatrix::zeros(4, 6));
        assert!(matches!(truncated_svd(&x, 3, 0), Err(Error::RankZero)));
    }

    #[test]
    fn retraction_examples() {
        let q = orthonormal_basis(&random_matrix(6, 3, 4));
        assert!((retract_to_stiefel(&q).unwrap() - &q).norm() < 1e-12);

        let diag = DenseMatrix::from_diagonal(&DenseVector::from_vec(vec![2.0, 0.5]));
        let r = retract_to_stiefel(&diag).unwrap();
        assert!((r - DenseMatrix::identity(2, 2)).norm() < 1e-12);

        let col = DenseMatrix::from_column_slice(2, 1, &[3.0, 4.0]);
        let r = retract_to_stiefel(&col).unwrap();
        assert!((r[(0, 0)] - 0.6).abs() < 1e-12 && (r[(1, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn retraction_rejects_rank_deficient_input() {
        let a = DenseMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            retract_to_stiefel(&a),
            Err(Error::RankDeficient { rank: 1, required: 2 })
        ));
    }

    #[test]
    fn retraction_is_idempotent() {
        for seed in 0..10 {
            let a = random_matrix(9, 4, 100 + seed);
            let once = retract_to_stiefel(&a).unwrap();
            let twice = retract_to_stiefel(&once).unwrap();
            assert!(orthonormality_error(&once) < 1e-10);
            assert!((once - twice).norm() < 1e-10);
        }
    }
}
