//! Optimization over the Stiefel manifold `St(d, r) = {P ∈ ℝ^{r×d} : PᵀP = I}`.
//!
//! The main entry point is [`minimize`], a feasible curvilinear search: each
//! step moves along the Cayley curve
//!
//! ```text
//! h(τ) = (I + τ/2·H)⁻¹ (I − τ/2·H) P,    H = G Pᵀ − P Gᵀ
//! ```
//!
//! which stays on the manifold for every `τ` because `H` is skew-symmetric.
//! Step lengths come from alternating Barzilai-Borwein formulas, accepted by
//! a non-monotone (Zhang-Hager averaged) Armijo test.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{
    matmul, matmul_nt, matmul_tn, orthonormality_error, orthonormalize_columns,
    retract_to_stiefel, DenseMatrix,
};

/// A matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint(DenseMatrix);

impl StiefelPoint {
    /// Largest accepted `‖PᵀP − I‖_F`.
    pub const TOLERANCE: f64 = 1e-8;

    pub fn new(p: DenseMatrix) -> Result<Self> {
        if p.nrows() < p.ncols() {
            return Err(Error::InvalidInput(format!(
                "a {}×{} matrix cannot have orthonormal columns",
                p.nrows(),
                p.ncols()
            )));
        }
        let err = orthonormality_error(&p);
        if !(err < Self::TOLERANCE) {
            return Err(Error::InvalidInput(format!(
                "point is off the manifold: ‖PᵀP − I‖ = {err:.3e}"
            )));
        }
        Ok(StiefelPoint(p))
    }

    /// Orthonormalized standard Gaussian matrix (QR with `diag(R) ≥ 0`).
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Self> {
        if rows < cols {
            return Err(Error::InvalidInput(format!("St({cols}, {rows}) is empty")));
        }
        let g = DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
        Self::new(orthonormalize_columns(&g))
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn feasibility_error(&self) -> f64 {
        orthonormality_error(&self.0)
    }
}

/// Hyperparameters of the curvilinear search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// Armijo sufficient-decrease constant, in (0, 1).
    pub rho: f64,
    /// Weight of the non-monotone reference average, in [0, 1).
    pub eta: f64,
    pub initial_tau: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Factor applied to `τ` after a rejected trial.
    pub backtrack: f64,
    pub max_trials: usize,
    pub max_iterations: usize,
    /// Stop once `|f_k − f_{k−1}| < tolerance · |f_{k−1}|`.
    pub tolerance: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            rho: 1e-4,
            eta: 0.85,
            initial_tau: 1e-3,
            tau_min: 1e-20,
            tau_max: 1e20,
            backtrack: 0.1,
            max_trials: 20,
            max_iterations: 50,
            tolerance: 1e-5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho > 0.0
            && self.rho < 1.0
            && (0.0..1.0).contains(&self.eta)
            && self.tau_min > 0.0
            && self.tau_min <= self.tau_max
            && self.backtrack > 0.0
            && self.backtrack < 1.0
            && self.initial_tau > 0.0
            && self.max_trials >= 1
            && self.tolerance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid search configuration {self:?}")))
        }
    }
}

/// `Ĝ = G − P Gᵀ P`
pub fn project_tangent(p: &StiefelPoint, g: &DenseMatrix) -> DenseMatrix {
    let gtp = matmul_tn(g, p.matrix());
    g - matmul(p.matrix(), &gtp)
}

/// Retraction of `P − Ĝ`: one projected-gradient step of unit length.
pub fn project_retract_step(p: &StiefelPoint, g: &DenseMatrix) -> Result<StiefelPoint> {
    let moved = p.matrix() - project_tangent(p, g);
    Ok(StiefelPoint(retract_to_stiefel(&moved)?))
}

/// `(I + τ/2·H)⁻¹ (I − τ/2·H) P` for an explicit skew-symmetric `H`.
pub fn cayley_transform(h: &DenseMatrix, p: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    let n = h.nrows();
    let eye = DenseMatrix::identity(n, n);
    let lhs = &eye + h * (0.5 * tau);
    let rhs = (&eye - h * (0.5 * tau)) * p;
    let out = lhs.lu().solve(&rhs).ok_or(Error::CurveSingular { tau })?;
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::CurveSingular { tau })
    }
}

/// Cayley curve with `H = G Pᵀ − P Gᵀ`, solved as a dense `r × r` system.
pub fn cayley_curve_dense(p: &StiefelPoint, g: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    let gp = matmul_nt(g, p.matrix());
    let h = &gp - gp.transpose();
    cayley_transform(&h, p.matrix(), tau)
}

/// Cayley curve `h(τ)` through `p` generated by the gradient `g`.
pub fn cayley_curve(p: &StiefelPoint, g: &DenseMatrix, tau: f64) -> Result<DenseMatrix> {
    CayleyCurve::new(p, g).at(tau)
}

/// Precomputed Cayley curve for repeated evaluation along one search line.
///
/// With `H = U Vᵀ`, `U = [G, P]`, `V = [P, −G]`, the Woodbury identity gives
/// `h(τ) = P − τ U (I + τ/2·VᵀU)⁻¹ VᵀP`, an `O(r d²)` evaluation. When
/// `2d ≥ r` the dense `r × r` form is cheaper and is used instead.
pub struct CayleyCurve<'a> {
    p: &'a StiefelPoint,
    g: &'a DenseMatrix,
    low_rank: Option<LowRankFactors>,
}

struct LowRankFactors {
    u: DenseMatrix,
    vtu: DenseMatrix,
    vtp: DenseMatrix,
}

impl<'a> CayleyCurve<'a> {
    pub fn new(p: &'a StiefelPoint, g: &'a DenseMatrix) -> Self {
        let (r, d) = (p.rows(), p.cols());
        let low_rank = (2 * d < r).then(|| {
            let pm = p.matrix();
            let mut u = DenseMatrix::zeros(r, 2 * d);
            u.columns_mut(0, d).copy_from(g);
            u.columns_mut(d, d).copy_from(pm);
            let mut v = DenseMatrix::zeros(r, 2 * d);
            v.columns_mut(0, d).copy_from(pm);
            v.columns_mut(d, d).copy_from(&(-g));
            LowRankFactors {
                vtu: matmul_tn(&v, &u),
                vtp: matmul_tn(&v, pm),
                u,
            }
        });
        CayleyCurve { p, g, low_rank }
    }

    pub fn at(&self, tau: f64) -> Result<DenseMatrix> {
        if tau == 0.0 {
            return Ok(self.p.matrix().clone());
        }
        let Some(f) = &self.low_rank else {
            return cayley_curve_dense(self.p, self.g, tau);
        };
        let k = f.vtu.nrows();
        let system = DenseMatrix::identity(k, k) + &f.vtu * (0.5 * tau);
        let x = system.lu().solve(&f.vtp).ok_or(Error::CurveSingular { tau })?;
        let out = self.p.matrix() - matmul(&f.u, &x) * tau;
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::CurveSingular { tau })
        }
    }
}

/// Objective over the manifold.
///
/// `value` and `gradient` must be pure functions of `p` between two calls of
/// `accept`, which the optimizer invokes right after each accepted step so
/// the objective can refresh any auxiliary state.
pub trait StiefelObjective {
    fn value(&mut self, p: &DenseMatrix) -> f64;
    /// Euclidean gradient `∂f/∂P`.
    fn gradient(&mut self, p: &DenseMatrix) -> DenseMatrix;
    fn accept(&mut self, _p: &StiefelPoint) {}
}

/// Snapshot passed to the per-iteration observer.
#[derive(Debug, Clone, Copy)]
pub struct IterationInfo<'a> {
    pub iteration: usize,
    pub objective: f64,
    /// `‖G‖_F` at the new point.
    pub gradient_norm: f64,
    /// Step length that was accepted.
    pub tau: f64,
    /// Non-monotone reference value after the update.
    pub reference: f64,
    pub trials: usize,
    pub point: &'a StiefelPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchStatus {
    Converged,
    ZeroGradient,
    MaxIterations,
    LineSearchStalled,
}

#[derive(Debug, Clone)]
pub struct MinimizeOutcome {
    pub point: StiefelPoint,
    pub objective: f64,
    pub iterations: usize,
    pub status: SearchStatus,
}

fn inner(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Non-monotone Barzilai-Borwein curvilinear search on the Cayley curve.
pub fn minimize<O, F>(
    p0: StiefelPoint,
    objective: &mut O,
    cfg: &SearchConfig,
    mut on_iteration: F,
) -> Result<MinimizeOutcome>
where
    O: StiefelObjective + ?Sized,
    F: FnMut(&IterationInfo<'_>),
{
    cfg.validate()?;
    let mut p = p0;
    let mut f = objective.value(p.matrix());
    let mut g = objective.gradient(p.matrix());
    let mut dtx = project_tangent(&p, &g);
    let mut reference = f;
    let mut weight = 1.0;
    let mut tau = cfg.initial_tau;

    for iteration in 1..=cfg.max_iterations {
        // Directional derivative along the curve is −⟨G, Ĝ⟩ = −½‖H‖².
        let slope = inner(&g, &dtx);
        if !(slope > f64::EPSILON * f.abs().max(1.0) * 1e-6) {
            return Ok(MinimizeOutcome {
                point: p,
                objective: f,
                iterations: iteration,
                status: SearchStatus::ZeroGradient,
            });
        }

        let curve = CayleyCurve::new(&p, &g);
        let mut accepted = None;
        for trial in 1..=cfg.max_trials {
            if let Ok(candidate) = curve.at(tau) {
                let fc = objective.value(&candidate);
                if fc <= reference - cfg.rho * tau * slope {
                    accepted = Some((candidate, trial));
                    break;
                }
            }
            tau = (tau * cfg.backtrack).max(cfg.tau_min);
        }
        let Some((candidate, trials)) = accepted else {
            log::warn!("line search stalled at iteration {iteration} (tau = {tau:.3e})");
            return Ok(MinimizeOutcome {
                point: p,
                objective: f,
                iterations: iteration,
                status: SearchStatus::LineSearchStalled,
            });
        };
        drop(curve);

        // Rounding drift along the curve is removed by a retraction.
        let candidate = if orthonormality_error(&candidate) > 1e-10 {
            retract_to_stiefel(&candidate)?
        } else {
            candidate
        };
        let next = StiefelPoint::new(candidate)?;
        objective.accept(&next);
        let f_next = objective.value(next.matrix());
        let g_next = objective.gradient(next.matrix());
        let dtx_next = project_tangent(&next, &g_next);

        let step = next.matrix() - p.matrix();
        let change = &dtx_next - &dtx;
        let sy = inner(&step, &change).abs();
        let accepted_tau = tau;
        if sy > 0.0 {
            tau = if iteration % 2 == 0 {
                step.norm_squared() / sy
            } else {
                sy / change.norm_squared()
            };
        }
        tau = tau.clamp(cfg.tau_min, cfg.tau_max);

        if f_next > reference {
            // `accept` changed the objective itself; the old average no
            // longer bounds it, so the averaging restarts here.
            reference = f_next;
            weight = 1.0;
        } else {
            let weight_next = cfg.eta * weight + 1.0;
            reference = (cfg.eta * weight * reference + f_next) / weight_next;
            weight = weight_next;
        }

        on_iteration(&IterationInfo {
            iteration,
            objective: f_next,
            gradient_norm: g_next.norm(),
            tau: accepted_tau,
            reference,
            trials,
            point: &next,
        });

        let converged = (f_next - f).abs() < cfg.tolerance * f.abs();
        p = next;
        f = f_next;
        g = g_next;
        dtx = dtx_next;
        if converged {
            return Ok(MinimizeOutcome {
                point: p,
                objective: f,
                iterations: iteration,
                status: SearchStatus::Converged,
            });
        }
    }
    Ok(MinimizeOutcome {
        point: p,
        objective: f,
        iterations: cfg.max_iterations,
        status: SearchStatus::MaxIterations,
    })
}
