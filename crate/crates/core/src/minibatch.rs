//! Mini-batch training for data that does not fit in memory.
//!
//! Each batch draws a few triplets, factors the current `L` through the
//! batch SVD as `B_I = L U_I Σ_I = Q_I diag(√s_I) P_Iᵀ`, takes one
//! projection-retraction step on `P_I`, rescales, and maps the result back:
//!
//! ```text
//! ΔL = Q_I diag(√ŝ_I) P̂_Iᵀ Σ_I⁻¹ U_Iᵀ − L,    L ← L + ΔL / √I
//! ```
//!
//! Only `D × n_I` and `d × D` matrices are ever formed.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::constraints::{build_constraint_matrices, restrict_to_samples, ConstraintMatrices, TripletSet};
use crate::error::{Error, Result};
use crate::linalg::{
    matmul, matmul_nt, numerical_rank, thin_svd, thin_svd_untrimmed, DataMatrix, DenseMatrix,
    DenseVector, SvdFactors,
};
use crate::stiefel::{project_retract_step, StiefelPoint};
use crate::trainer::{curvature, optimal_scaling, FlrmlProblem, FlrmlState, MetricModel};

/// Random access to the columns (samples) of a `dim × len` data matrix.
pub trait ColumnSource {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    /// Dense `dim × indices.len()` matrix of the requested columns, in order.
    fn read_columns(&self, indices: &[usize]) -> Result<DenseMatrix>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ColumnSource for DataMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn len(&self) -> usize {
        self.ncols()
    }

    fn read_columns(&self, indices: &[usize]) -> Result<DenseMatrix> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= self.ncols()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                n: self.ncols(),
            });
        }
        Ok(self.select_columns(indices))
    }
}

impl<S: ColumnSource + ?Sized> ColumnSource for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn len(&self) -> usize {
        (**self).len()
    }

    fn read_columns(&self, indices: &[usize]) -> Result<DenseMatrix> {
        (**self).read_columns(indices)
    }
}

#[derive(Debug, Clone)]
pub struct MiniBatch {
    /// Global sample indices, ascending.
    pub sample_indices: Vec<usize>,
    pub x_batch: DenseMatrix,
    /// Constraints over local positions in `sample_indices`.
    pub c_batch: ConstraintMatrices,
    pub batch_index: usize,
}

/// Batch sample set: the union of `n_t` triplets drawn without replacement,
/// padded with random samples until it holds more than `d` of them.
///
/// The returned local triplet set holds every triplet lying wholly inside
/// the batch, not only the drawn ones.
pub fn sample_batch_indices<R: Rng + ?Sized>(
    ts: &TripletSet,
    n: usize,
    n_t: usize,
    d: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, TripletSet)> {
    if n <= d {
        return Err(Error::InsufficientData {
            required: d + 1,
            available: n,
        });
    }
    if ts.index_bound() > n {
        return Err(Error::IndexOutOfRange {
            index: ts.index_bound() - 1,
            n,
        });
    }
    let mut chosen = BTreeSet::new();
    let draws = n_t.min(ts.len());
    for t in sample(rng, ts.len(), draws).into_iter() {
        let t = ts.triplets()[t];
        chosen.extend([t.anchor, t.positive, t.negative]);
    }
    while chosen.len() <= d {
        chosen.insert(rng.random_range(0..n));
    }
    let samples: Vec<usize> = chosen.into_iter().collect();
    let local = restrict_to_samples(ts, &samples)?;
    Ok((samples, local))
}

/// Draws one batch and fetches its columns from `source`.
pub fn sample_minibatch<S: ColumnSource + ?Sized, R: Rng + ?Sized>(
    source: &S,
    ts: &TripletSet,
    n_t: usize,
    d: usize,
    batch_index: usize,
    rng: &mut R,
) -> Result<MiniBatch> {
    let (sample_indices, local) = sample_batch_indices(ts, source.len(), n_t, d, rng)?;
    let c_batch = build_constraint_matrices(&local, sample_indices.len())?;
    let x_batch = source.read_columns(&sample_indices)?;
    if x_batch.shape() != (source.dim(), sample_indices.len()) {
        return Err(Error::InvalidInput(format!(
            "column source returned a {}×{} block, expected {}×{}",
            x_batch.nrows(),
            x_batch.ncols(),
            source.dim(),
            sample_indices.len()
        )));
    }
    Ok(MiniBatch {
        sample_indices,
        x_batch,
        c_batch,
        batch_index,
    })
}

/// Factorization of the current model on one batch.
#[derive(Debug, Clone)]
pub struct BatchFactors {
    pub svd: SvdFactors,
    /// `B_I = L U_I Σ_I` (`d × r_I`).
    pub b_i: DenseMatrix,
    /// Left singular vectors of `B_I` (`d × d'`).
    pub q_i: DenseMatrix,
    /// Right singular vectors of `B_I` (`r_I × d'`).
    pub p_i: StiefelPoint,
    /// Squared singular values of `B_I`; the trailing ones may be zero.
    pub s_i: DenseVector,
}

impl BatchFactors {
    /// Factors `l` on the columns `x_batch`.
    ///
    /// `d' = min(d, r_I)`. When `B_I` has rank below `d'` the missing
    /// directions carry `s = 0`; a zero `B_I` is an error.
    pub fn new(l: &MetricModel, x_batch: &DenseMatrix) -> Result<Self> {
        if l.input_dim() != x_batch.nrows() {
            return Err(Error::InvalidInput(format!(
                "model expects dimension {} but the batch has {}",
                l.input_dim(),
                x_batch.nrows()
            )));
        }
        let svd = thin_svd(x_batch)?;
        if svd.rank() == 0 {
            return Err(Error::RankZero);
        }
        let mut b_i = matmul(&l.l, &svd.u);
        for (j, s) in svd.sigma.iter().enumerate() {
            b_i.column_mut(j).scale_mut(*s);
        }
        let factors = thin_svd_untrimmed(&b_i)?;
        let rank = numerical_rank(&factors);
        if rank == 0 {
            return Err(Error::RankDeficient {
                rank: 0,
                required: factors.rank(),
            });
        }
        let mut s_i = factors.sigma.map(|v| v * v);
        for v in s_i.iter_mut().skip(rank) {
            *v = 0.0;
        }
        let p_i = StiefelPoint::new(factors.v)?;
        Ok(BatchFactors {
            svd,
            b_i,
            q_i: factors.u,
            p_i,
            s_i,
        })
    }

    /// `Q_I diag(√s) Pᵀ Σ_I⁻¹ U_Iᵀ`, the model whose batch factor is
    /// `Q_I diag(√s) Pᵀ`.
    pub fn lift(&self, p: &StiefelPoint, s: &DenseVector) -> DenseMatrix {
        let mut a = self.q_i.clone();
        for (j, sj) in s.iter().enumerate() {
            a.column_mut(j).scale_mut(sj.max(0.0).sqrt());
        }
        let mut a = matmul_nt(&a, p.matrix());
        for (j, sigma) in self.svd.sigma.iter().enumerate() {
            a.column_mut(j).unscale_mut(*sigma);
        }
        matmul_nt(&a, &self.svd.u)
    }
}

#[derive(Debug, Clone)]
pub struct BatchUpdate {
    pub delta_l: DenseMatrix,
    pub p_hat: StiefelPoint,
    pub s_hat: DenseVector,
    /// Batch objective before the step.
    pub objective: f64,
    pub margin: f64,
    pub rank: usize,
    pub active: usize,
}

/// One descent direction `ΔL` from a batch.
///
/// The batch margin is `ratio · l̄_y` of the batch's current embedding.
pub fn batch_step(l: &MetricModel, batch: &MiniBatch, margin_ratio: f64) -> Result<BatchUpdate> {
    let factors = BatchFactors::new(l, &batch.x_batch)?;
    let d_prime = factors.p_i.cols();
    let problem = FlrmlProblem::new(factors.svd.clone(), batch.c_batch.clone(), d_prime)?;
    let mut state = FlrmlState::new(
        factors.p_i.clone(),
        factors.s_i.clone(),
        1.0,
        batch.sample_indices.len(),
    )?;
    let margin = state.compute_margin(margin_ratio)?;
    state.update_active_set(&problem);
    let objective = state.objective();
    let g = state.gradient();
    let p_hat = project_retract_step(&state.p, &g)?;
    let (k_hat, _) = curvature(&state.k_mat, p_hat.matrix());
    let s_hat = optimal_scaling(&k_hat);
    let delta_l = factors.lift(&p_hat, &s_hat) - &l.l;
    Ok(BatchUpdate {
        delta_l,
        p_hat,
        s_hat,
        objective,
        margin,
        rank: factors.svd.rank(),
        active: state.lambda.iter().filter(|&&a| a).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiniBatchConfig {
    pub d: usize,
    /// Triplets drawn per batch.
    pub n_t: usize,
    pub num_batches: usize,
    pub margin_ratio: f64,
}

impl Default for MiniBatchConfig {
    fn default() -> Self {
        MiniBatchConfig {
            d: 100,
            n_t: 80,
            num_batches: 20,
            margin_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchReport {
    pub batch_index: usize,
    pub n_i: usize,
    pub rank: usize,
    pub objective: Option<f64>,
    pub skipped: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct MiniBatchOutcome {
    pub model: MetricModel,
    pub batches: Vec<BatchReport>,
}

/// `L₀` with independent `Normal(0, 1/D)` entries.
pub fn initial_model<R: Rng + ?Sized>(d: usize, dim: usize, rng: &mut R) -> Result<MetricModel> {
    let normal = Normal::new(0.0, 1.0 / (dim.max(1) as f64).sqrt())
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    MetricModel::new(DenseMatrix::from_fn(d, dim, |_, _| normal.sample(rng)))
}

/// The random starting model used by [`train_minibatch`] for `seed`.
pub fn starting_model(d: usize, dim: usize, seed: u64) -> Result<MetricModel> {
    initial_model(d, dim, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Runs `num_batches` batch updates with step `1/√I` from a random `L₀`.
///
/// A batch that fails is skipped with a warning; its index still counts.
pub fn train_minibatch<S: ColumnSource + ?Sized>(
    source: &S,
    ts: &TripletSet,
    cfg: &MiniBatchConfig,
    seed: u64,
) -> Result<MiniBatchOutcome> {
    if cfg.num_batches == 0 {
        return Err(Error::InvalidInput("at least one batch is required".into()));
    }
    if cfg.d == 0 || cfg.n_t == 0 {
        return Err(Error::InvalidInput("rank and triplets per batch must be positive".into()));
    }
    if ts.is_empty() {
        return Err(Error::InvalidInput("no triplets to train on".into()));
    }
    let start = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = initial_model(cfg.d, source.dim(), &mut rng)?;
    let mut batches = Vec::with_capacity(cfg.num_batches);
    for index in 1..=cfg.num_batches {
        let batch = sample_minibatch(source, ts, cfg.n_t, cfg.d, index, &mut rng)?;
        let n_i = batch.sample_indices.len();
        match batch_step(&model, &batch, cfg.margin_ratio) {
            Ok(update) => {
                model.l += update.delta_l * (1.0 / (index as f64).sqrt());
                log::debug!(
                    "batch {index}: n_I = {n_i}, r_I = {}, f = {:.6e}, active = {}",
                    update.rank,
                    update.objective,
                    update.active
                );
                batches.push(BatchReport {
                    batch_index: index,
                    n_i,
                    rank: update.rank,
                    objective: Some(update.objective),
                    skipped: false,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            Err(e) => {
                log::warn!("batch {index} skipped: {e}");
                batches.push(BatchReport {
                    batch_index: index,
                    n_i,
                    rank: 0,
                    objective: None,
                    skipped: true,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(MiniBatchOutcome { model, batches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{generate_triplets, Triplet};
    use crate::linalg::orthonormality_error;
    use rand_distr::StandardNormal;

    fn gaussian(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn single(t: Triplet) -> TripletSet {
        TripletSet::new(vec![t]).unwrap()
    }

    #[test]
    fn union_alone_can_exceed_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (samples, local) =
            sample_batch_indices(&single(Triplet::new(3, 7, 9)), 10, 80, 2, &mut rng).unwrap();
        assert_eq!(samples, vec![3, 7, 9]);
        assert_eq!(local.triplets(), &[Triplet::new(0, 1, 2)]);
    }

    #[test]
    fn padding_reaches_rank_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (samples, local) =
            sample_batch_indices(&single(Triplet::new(0, 1, 2)), 50, 80, 5, &mut rng).unwrap();
        assert_eq!(samples.len(), 6);
        assert!(samples.contains(&0) && samples.contains(&1) && samples.contains(&2));
        assert_eq!(local.len(), 1);
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_batch_indices(&single(Triplet::new(0, 1, 2)), 4, 1, 4, &mut rng),
            Err(Error::InsufficientData { required: 5, available: 4 })
        ));
    }

    #[test]
    fn batch_keeps_whole_triplets_only() {
        let labels: Vec<i64> = (0..200).map(|i| (i % 4) as i64).collect();
        let ts = generate_triplets(&labels, 3, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (samples, local) = sample_batch_indices(&ts, 200, 10, 3, &mut rng).unwrap();
        let members: BTreeSet<_> = samples.iter().copied().collect();
        let expected = ts
            .iter()
            .filter(|t| [t.anchor, t.positive, t.negative].iter().all(|i| members.contains(i)))
            .count();
        assert!(local.len() >= 10);
        assert_eq!(local.len(), expected);
    }

    #[test]
    fn factors_reproduce_batch_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian(30, 12, &mut rng);
        let l = initial_model(4, 30, &mut rng).unwrap();
        let f = BatchFactors::new(&l, &x).unwrap();
        let mut qs = f.q_i.clone();
        for (j, s) in f.s_i.iter().enumerate() {
            qs.column_mut(j).scale_mut(s.sqrt());
        }
        assert!((qs * f.p_i.matrix().transpose() - &f.b_i).norm() < 1e-10);
        assert!(f.s_i.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn unchanged_factors_only_project_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = gaussian(25, 10, &mut rng);
        let l = initial_model(3, 25, &mut rng).unwrap();
        let f = BatchFactors::new(&l, &x).unwrap();
        let delta = f.lift(&f.p_i, &f.s_i) - &l.l;
        // ΔL = L (U Uᵀ − I): zero on the batch's column space.
        assert!((&delta * &f.svd.u).norm() < 1e-10);
        assert!((&delta * &x).norm() < 1e-10 * x.norm());
    }

    #[test]
    fn zero_model_is_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gaussian(10, 6, &mut rng);
        let l = MetricModel::new(DenseMatrix::zeros(2, 10)).unwrap();
        assert!(matches!(
            BatchFactors::new(&l, &x),
            Err(Error::RankDeficient { rank: 0, .. })
        ));
    }

    #[test]
    fn deficient_factor_pads_with_zero_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian(12, 8, &mut rng);
        // Rank-one L with three rows.
        let l = gaussian(3, 1, &mut rng) * gaussian(1, 12, &mut rng);
        let f = BatchFactors::new(&MetricModel::new(l).unwrap(), &x).unwrap();
        assert_eq!(f.p_i.cols(), 3);
        assert_eq!(f.s_i.iter().filter(|&&s| s == 0.0).count(), 2);
        assert!(f.p_i.feasibility_error() < 1e-8);
    }

    #[test]
    fn batch_step_keeps_retracted_point_feasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 120;
        let x = DataMatrix::Dense(gaussian(20, n, &mut rng));
        let labels: Vec<i64> = (0..n).map(|i| (i % 3) as i64).collect();
        let ts = generate_triplets(&labels, 3, 1).unwrap();
        let l = initial_model(4, 20, &mut rng).unwrap();
        for index in 1..=5 {
            let batch = sample_minibatch(&x, &ts, 20, 4, index, &mut rng).unwrap();
            let up = batch_step(&l, &batch, 1.0).unwrap();
            assert!(orthonormality_error(up.p_hat.matrix()) < 1e-8);
            assert!(up.s_hat.iter().all(|&s| s >= 0.0));
            assert_eq!(up.delta_l.shape(), (4, 20));
        }
    }

    #[test]
    fn first_batch_takes_full_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 60;
        let x = DataMatrix::Dense(gaussian(15, n, &mut rng));
        let labels: Vec<i64> = (0..n).map(|i| (i % 2) as i64).collect();
        let ts = generate_triplets(&labels, 2, 2).unwrap();
        let cfg = MiniBatchConfig {
            d: 3,
            n_t: 10,
            num_batches: 1,
            margin_ratio: 1.0,
        };
        let out = train_minibatch(&x, &ts, &cfg, 4).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l0 = initial_model(3, 15, &mut rng).unwrap();
        assert_eq!(l0, starting_model(3, 15, 4).unwrap());
        let batch = sample_minibatch(&x, &ts, 10, 3, 1, &mut rng).unwrap();
        let up = batch_step(&l0, &batch, 1.0).unwrap();
        assert!((&out.model.l - (&l0.l + &up.delta_l)).norm() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 80;
        let x = DataMatrix::Dense(gaussian(12, n, &mut rng));
        let labels: Vec<i64> = (0..n).map(|i| (i % 4) as i64).collect();
        let ts = generate_triplets(&labels, 2, 3).unwrap();
        let cfg = MiniBatchConfig {
            d: 3,
            n_t: 15,
            num_batches: 6,
            margin_ratio: 1.0,
        };
        let a = train_minibatch(&x, &ts, &cfg, 5).unwrap();
        let b = train_minibatch(&x, &ts, &cfg, 5).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.batches.len(), 6);
    }
}
