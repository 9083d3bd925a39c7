//! Full-batch low-rank metric learning.
//!
//! With `X = U Σ Vᵀ` truncated to rank `r`, embeddings are restricted to
//! `Y = B Vᵀ` and the metric to `L = B Σ⁻¹ Uᵀ`, which loses nothing when
//! `r = rank(X)`. Writing `W = BᵀB = P diag(s) Pᵀ` with `P` on the Stiefel
//! manifold, the triplet hinge loss becomes
//!
//! ```text
//! tr(W K) + M(Λ),    K = VᵀCT Λ V,    M(Λ) = m · #active
//! ```
//!
//! and after eliminating `s` the objective reduces to
//! `f(P) = −½ Σ μ(k_i) k_i + M(Λ)` with `k_i = −p_iᵀ K p_i`.

use std::time::Instant;

use faer::linalg::matmul::matmul as faer_matmul;
use faer::{Accum, Par};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::constraints::ConstraintMatrices;
use crate::error::{Error, Result};
use crate::linalg::{
    as_faer, as_faer_mut, matmul, matmul_nt, matmul_tn, truncated_svd, DataMatrix, DenseMatrix, DenseVector,
    SvdFactors,
};
use crate::stiefel::{
    minimize, IterationInfo, SearchConfig, SearchStatus, StiefelObjective, StiefelPoint,
};

/// `μ(x) = log(1 + eˣ)`, a smooth upper bound of `max(0, x)`.
pub fn smoothed_hinge(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ŝ_i = max(0, k_i)`
pub fn optimal_scaling(k: &DenseVector) -> DenseVector {
    k.map(|v| v.max(0.0))
}

/// `(1/n) Σ ‖y_i‖²` over the columns of `y`.
pub fn mean_squared_norm(y: &DenseMatrix) -> f64 {
    if y.ncols() == 0 {
        return 0.0;
    }
    y.norm_squared() / y.ncols() as f64
}

/// The learned linear map `L` (`d × D`); the metric is `M = LᵀL`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    pub l: DenseMatrix,
}

impl MetricModel {
    pub fn new(l: DenseMatrix) -> Result<Self> {
        if !l.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("model contains non-finite entries".into()));
        }
        Ok(MetricModel { l })
    }

    /// `L = B Σ⁻¹ Uᵀ`, the minimum-norm solution of `L X = B Vᵀ`.
    pub fn from_factors(b: &DenseMatrix, svd: &SvdFactors) -> Result<Self> {
        let mut scaled = b.clone();
        for (j, s) in svd.sigma.iter().enumerate() {
            scaled.column_mut(j).unscale_mut(*s);
        }
        Self::new(matmul_nt(&scaled, &svd.u))
    }

    /// Output dimension `d`.
    pub fn rank(&self) -> usize {
        self.l.nrows()
    }

    /// Input dimension `D`.
    pub fn input_dim(&self) -> usize {
        self.l.ncols()
    }
}

/// `diag(√s) Pᵀ`
pub fn embedding_factor(p: &DenseMatrix, s: &DenseVector) -> DenseMatrix {
    let mut b = p.transpose();
    for (i, si) in s.iter().enumerate() {
        b.row_mut(i).scale_mut(si.max(0.0).sqrt());
    }
    b
}

/// Immutable inputs of one training problem.
#[derive(Debug, Clone)]
pub struct FlrmlProblem {
    pub svd: SvdFactors,
    /// The constant `VᵀCT` (`r × n`).
    pub vct: DenseMatrix,
    pub cm: ConstraintMatrices,
    pub d: usize,
}

impl FlrmlProblem {
    /// Target ranks above `r` are clamped to `r`.
    pub fn new(svd: SvdFactors, cm: ConstraintMatrices, d: usize) -> Result<Self> {
        let (n, r) = svd.v.shape();
        if cm.n() != n {
            return Err(Error::InvalidInput(format!(
                "constraints cover {} samples but the data has {n}",
                cm.n()
            )));
        }
        if r == 0 {
            return Err(Error::RankZero);
        }
        if d == 0 {
            return Err(Error::InvalidInput("target rank must be at least 1".into()));
        }
        let d = if d > r {
            log::warn!("target rank {d} exceeds data rank {r}; using {r}");
            r
        } else {
            d
        };
        let vct = constant_projection(&svd.v, &cm);
        Ok(FlrmlProblem { svd, vct, cm, d })
    }

    /// Truncated SVD of `x` capped at `svd_cap`, then [`FlrmlProblem::new`].
    pub fn from_data(
        x: &DataMatrix,
        cm: ConstraintMatrices,
        d: usize,
        svd_cap: usize,
        seed: u64,
    ) -> Result<Self> {
        let svd = truncated_svd(x, svd_cap, seed)?;
        Self::new(svd, cm, d)
    }

    pub fn n(&self) -> usize {
        self.svd.v.nrows()
    }

    pub fn r(&self) -> usize {
        self.svd.rank()
    }
}

/// `VᵀCT`, accumulated column by column from the sparse `C`.
fn constant_projection(v: &DenseMatrix, cm: &ConstraintMatrices) -> DenseMatrix {
    let (n, r) = v.shape();
    let mut out = DenseMatrix::zeros(r, n);
    for i in 0..n {
        let (rows, vals) = cm.c.column(i);
        if rows.is_empty() {
            continue;
        }
        let mut col = out.column_mut(i);
        for (&j, &c) in rows.iter().zip(vals) {
            for a in 0..r {
                col[a] += c * v[(j, a)];
            }
        }
        col.scale_mut(cm.t_diag[i]);
    }
    out
}

/// Columns per block when accumulating `K` over the active set.
const K_BLOCK: usize = 2048;

/// Mutable optimization state of one run.
#[derive(Debug, Clone)]
pub struct FlrmlState {
    pub p: StiefelPoint,
    pub s: DenseVector,
    pub lambda: Vec<bool>,
    pub k_mat: DenseMatrix,
    pub k_vec: DenseVector,
    pub q_vec: DenseVector,
    pub z_vec: DenseVector,
    pub m: f64,
    pub m_lambda: f64,
}

impl FlrmlState {
    /// A state at `p` with scaling `s` and margin `m`. The derived fields
    /// are populated by [`FlrmlState::update_active_set`].
    pub fn new(p: StiefelPoint, s: DenseVector, m: f64, n: usize) -> Result<Self> {
        let (r, d) = (p.rows(), p.cols());
        if s.len() != d {
            return Err(Error::InvalidInput(format!("scaling has length {} but d = {d}", s.len())));
        }
        if s.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidInput("scaling entries must be nonnegative".into()));
        }
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::InvalidInput(format!("margin must be positive, got {m}")));
        }
        Ok(FlrmlState {
            p,
            s,
            lambda: vec![false; n],
            k_mat: DenseMatrix::zeros(r, r),
            k_vec: DenseVector::zeros(d),
            q_vec: DenseVector::zeros(d),
            z_vec: DenseVector::zeros(n),
            m,
            m_lambda: 0.0,
        })
    }

    /// Recomputes `z`, `Λ`, `M(Λ)` and `K` from the current `P` and `s`,
    /// then `k` and `q` from the new `K`.
    pub fn update_active_set(&mut self, problem: &FlrmlProblem) {
        let b = embedding_factor(self.p.matrix(), &self.s);
        // z_i = y_iᵀ (Y C T)_i with Y = B Vᵀ and Y C T = B (VᵀCT).
        let y = matmul_nt(&b, &problem.svd.v);
        let yct = matmul(&b, &problem.vct);
        for i in 0..self.z_vec.len() {
            self.z_vec[i] = y.column(i).dot(&yct.column(i));
        }
        drop((y, yct));

        let mut active = 0usize;
        for (flag, z) in self.lambda.iter_mut().zip(self.z_vec.iter()) {
            *flag = z + self.m > 0.0;
            active += *flag as usize;
        }
        self.m_lambda = self.m * active as f64;
        self.k_mat = active_set_product(problem, &self.lambda);
        self.refresh_k();
    }

    /// Recomputes `k_i = −p_iᵀ K p_i` and `q_i` at the current `P`.
    pub fn refresh_k(&mut self) {
        let (k, q) = curvature(&self.k_mat, self.p.matrix());
        self.k_vec = k;
        self.q_vec = q;
    }

    /// `f = −½ Σ μ(k_i) k_i + M(Λ)`
    pub fn objective(&self) -> f64 {
        smoothed_value(&self.k_vec, self.m_lambda)
    }

    /// `G = −(K + Kᵀ) P diag(q)`
    pub fn gradient(&self) -> DenseMatrix {
        smoothed_gradient(&self.k_mat, self.p.matrix(), &self.q_vec)
    }

    /// `l̄_y = (1/n) Σ ‖y_i‖² = Σ s_i / n`, using `VᵀV = I` and `PᵀP = I`.
    pub fn mean_sq_norm(&self) -> f64 {
        let n = self.lambda.len();
        if n == 0 {
            return 0.0;
        }
        self.s.sum() / n as f64
    }

    /// Sets `m = ratio · l̄_y` and returns it.
    pub fn compute_margin(&mut self, ratio: f64) -> Result<f64> {
        if !(ratio > 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidInput(format!("margin ratio must be positive, got {ratio}")));
        }
        let mean = self.mean_sq_norm();
        if !(mean > 0.0) {
            return Err(Error::DegenerateInit);
        }
        self.m = ratio * mean;
        Ok(self.m)
    }

    /// Fixed-point iteration `s ← ŝ(s)` at the current `P` until
    /// `‖s − ŝ‖∞ < 1e-10`, see [`solve_scaling`].
    ///
    /// Returns whether it converged and the number of passes. The state is
    /// left consistent with the final `s`.
    pub fn initialize_scaling(&mut self, problem: &FlrmlProblem, max_iters: usize) -> (bool, usize) {
        let a = scaling_coefficients(problem, self.p.matrix());
        let (s, converged, passes) = solve_scaling(&a, &self.s, self.m, max_iters);
        self.s = s;
        self.update_active_set(problem);
        (converged, passes)
    }

    /// `diag(√s) Pᵀ Σ⁻¹ Uᵀ`
    pub fn model(&self, problem: &FlrmlProblem) -> Result<MetricModel> {
        MetricModel::from_factors(&embedding_factor(self.p.matrix(), &self.s), &problem.svd)
    }
}

/// `VᵀCT Λ V`, gathered in blocks of active columns.
fn active_set_product(problem: &FlrmlProblem, lambda: &[bool]) -> DenseMatrix {
    let r = problem.r();
    let mut k = DenseMatrix::zeros(r, r);
    let mut idx = Vec::with_capacity(K_BLOCK);
    for start in (0..lambda.len()).step_by(K_BLOCK) {
        idx.clear();
        let end = (start + K_BLOCK).min(lambda.len());
        // Samples anchoring no triplet (t = 1) have a zero column in VᵀCT.
        idx.extend((start..end).filter(|&i| lambda[i] && problem.cm.t_diag[i] < 1.0));
        if idx.is_empty() {
            continue;
        }
        let lhs = problem.vct.select_columns(&idx);
        let rhs = problem.svd.v.select_rows(&idx);
        faer_matmul(
            as_faer_mut(&mut k),
            Accum::Add,
            as_faer(&lhs),
            as_faer(&rhs),
            1.0,
            Par::Seq,
        );
    }
    k
}

/// Coefficients of `z` in `s` at fixed `P`: `z = A s` with
/// `A_il = (V p_l)_i ((VᵀCT)ᵀ p_l)_i` (`n × d`). Likewise
/// `k_l = −Σ_i Λ_i A_il`.
pub fn scaling_coefficients(problem: &FlrmlProblem, p: &DenseMatrix) -> DenseMatrix {
    let vp = matmul(&problem.svd.v, p);
    let wp = matmul_tn(&problem.vct, p);
    vp.component_mul(&wp)
}

/// `½‖s‖² + Σ max(0, z_i + m)`: the hinge loss at fixed `P` as a function
/// of the scaling alone.
pub fn scaling_loss(a: &DenseMatrix, s: &DenseVector, m: f64) -> f64 {
    let z = a * s;
    0.5 * s.norm_squared() + z.iter().map(|zi| (zi + m).max(0.0)).sum::<f64>()
}

/// `ŝ = max(0, k)` with `Λ` taken at `s`.
fn scaling_step(a: &DenseMatrix, s: &DenseVector, m: f64) -> DenseVector {
    let z = a * s;
    let mut k = DenseVector::zeros(a.ncols());
    for (i, zi) in z.iter().enumerate() {
        if zi + m > 0.0 {
            k -= a.row(i).transpose();
        }
    }
    optimal_scaling(&k)
}

/// Iterates `s ← ŝ(s)` from `s0` at fixed `P`.
///
/// A full step is taken whenever it does not increase [`scaling_loss`];
/// otherwise the step toward `ŝ` is halved until it does. When the loss
/// minimizer puts an anchor exactly on its margin no exact fixed point
/// exists and the iteration ends unconverged near that minimizer.
pub fn solve_scaling(
    a: &DenseMatrix,
    s0: &DenseVector,
    m: f64,
    max_iters: usize,
) -> (DenseVector, bool, usize) {
    let mut s = s0.clone();
    for pass in 1..=max_iters {
        let next = scaling_step(a, &s, m);
        let dir = &next - &s;
        if dir.amax() < 1e-10 {
            return (s, true, pass);
        }
        let current = scaling_loss(a, &s, m);
        let mut alpha = 1.0;
        while scaling_loss(a, &(&s + alpha * &dir), m) > current {
            alpha *= 0.5;
            if alpha < 1e-12 {
                return (s, false, pass);
            }
        }
        s += alpha * dir;
    }
    (s, false, max_iters)
}

/// `k_i = −p_iᵀ K p_i` and `q_i = −½(μ(k_i) + k_i σ(k_i))`.
pub fn curvature(k_mat: &DenseMatrix, p: &DenseMatrix) -> (DenseVector, DenseVector) {
    let kp = matmul(k_mat, p);
    let k = DenseVector::from_fn(p.ncols(), |i, _| -p.column(i).dot(&kp.column(i)));
    let q = k.map(|ki| -0.5 * (smoothed_hinge(ki) + ki * sigmoid(ki)));
    (k, q)
}

pub fn smoothed_value(k_vec: &DenseVector, m_lambda: f64) -> f64 {
    -0.5 * k_vec.iter().map(|&k| smoothed_hinge(k) * k).sum::<f64>() + m_lambda
}

pub fn smoothed_gradient(k_mat: &DenseMatrix, p: &DenseMatrix, q: &DenseVector) -> DenseMatrix {
    let sym = k_mat + k_mat.transpose();
    let mut g = matmul(&sym, p);
    for (j, qj) in q.iter().enumerate() {
        g.column_mut(j).scale_mut(-qj);
    }
    g
}

/// The objective seen by the manifold optimizer: `K` and `Λ` are frozen
/// during each line search and refreshed once a step is accepted.
struct FrozenObjective<'a> {
    problem: &'a FlrmlProblem,
    state: &'a mut FlrmlState,
    scaling_iterations: usize,
}

impl StiefelObjective for FrozenObjective<'_> {
    fn value(&mut self, p: &DenseMatrix) -> f64 {
        let (k, _) = curvature(&self.state.k_mat, p);
        smoothed_value(&k, self.state.m_lambda)
    }

    fn gradient(&mut self, p: &DenseMatrix) -> DenseMatrix {
        let (_, q) = curvature(&self.state.k_mat, p);
        smoothed_gradient(&self.state.k_mat, p, &q)
    }

    fn accept(&mut self, p: &StiefelPoint) {
        self.state.p = p.clone();
        self.state.initialize_scaling(self.problem, self.scaling_iterations);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlrmlConfig {
    pub search: SearchConfig,
    /// `m / l̄_y` at initialization.
    pub margin_ratio: f64,
    /// Pass limit of the scaling fixed-point iteration.
    pub scaling_iterations: usize,
    /// Random restarts allowed when the initial embedding is degenerate.
    pub init_attempts: usize,
}

impl Default for FlrmlConfig {
    fn default() -> Self {
        FlrmlConfig {
            search: SearchConfig::default(),
            margin_ratio: 1.0,
            scaling_iterations: 20,
            init_attempts: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub f: f64,
    pub gnorm: f64,
    pub tau: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MetricModel,
    pub trace: ConvergenceTrace,
    pub status: SearchStatus,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub margin: f64,
    pub scaling_converged: bool,
    pub scaling_iterations: usize,
    pub state: FlrmlState,
}

/// Random feasible start, margin and scaling initialization.
///
/// With `s = 0` every `z_i` vanishes, so the first pass activates every
/// constraint for any positive margin; its `ŝ` fixes `l̄_y` and hence `m`.
pub fn initial_state(
    problem: &FlrmlProblem,
    cfg: &FlrmlConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(FlrmlState, bool, usize)> {
    for attempt in 0..cfg.init_attempts.max(1) {
        let p = StiefelPoint::random(problem.r(), problem.d, rng)?;
        // Every anchor is active at s = 0 whatever the margin.
        let a = scaling_coefficients(problem, p.matrix());
        let s = optimal_scaling(&-(a.transpose() * DenseVector::from_element(problem.n(), 1.0)));
        let mut state = FlrmlState::new(p, s, 1.0, problem.n())?;
        match state.compute_margin(cfg.margin_ratio) {
            Ok(_) => {
                let (converged, iters) = state.initialize_scaling(problem, cfg.scaling_iterations);
                if !converged {
                    log::warn!("scaling initialization did not converge in {iters} passes");
                }
                return Ok((state, converged, iters));
            }
            Err(Error::DegenerateInit) => {
                log::warn!("degenerate initial embedding (attempt {}), resampling", attempt + 1)
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateInit)
}

/// Runs the full-batch method and extracts `L = √S Pᵀ Σ⁻¹ Uᵀ`.
pub fn train(problem: &FlrmlProblem, cfg: &FlrmlConfig, seed: u64) -> Result<TrainOutcome> {
    train_with_observer(problem, cfg, seed, |_| {})
}

/// `train` with a callback after every accepted optimizer step.
pub fn train_with_observer<F>(
    problem: &FlrmlProblem,
    cfg: &FlrmlConfig,
    seed: u64,
    mut on_iteration: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&IterationInfo<'_>),
{
    cfg.search.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state, scaling_converged, scaling_iterations) = initial_state(problem, cfg, &mut rng)?;
    let initial_objective = state.objective();
    let margin = state.m;

    let mut trace = ConvergenceTrace::default();
    let p0 = state.p.clone();
    let outcome = {
        let mut objective = FrozenObjective {
            problem,
            state: &mut state,
            scaling_iterations: cfg.scaling_iterations,
        };
        minimize(p0, &mut objective, &cfg.search, |info| {
            trace.rows.push(TraceRow {
                iter: info.iteration,
                f: info.objective,
                gnorm: info.gradient_norm,
                tau: info.tau,
                seconds: start.elapsed().as_secs_f64(),
            });
            on_iteration(info);
        })?
    };
    log::info!(
        "optimization finished: {:?} after {} iterations, f = {:.6e}",
        outcome.status,
        outcome.iterations,
        outcome.objective
    );
    let model = state.model(problem)?;
    Ok(TrainOutcome {
        model,
        trace,
        status: outcome.status,
        initial_objective,
        final_objective: state.objective(),
        margin,
        scaling_converged,
        scaling_iterations,
        state,
    })
}
