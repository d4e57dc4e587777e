//! Backward Riccati recursion, the algebraic Riccati equation and the
//! completion-of-squares form of the cost.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{affine_quad_expectation, cholesky, is_schur_stable, psd_factor, Matrix, SymMatrix};
use crate::model::{stage_cost, LtiStochasticSystem, QuadraticCost};
use crate::stationary::MomentTrajectory;

pub const DARE_MAX_ITERATIONS: usize = 100_000;
pub const DARE_STEP_TOL: f64 = 1e-12;
/// Non-improving polishing steps tolerated after convergence.
const POLISH_PATIENCE: usize = 20;

/// One step of the Riccati map.
#[derive(Debug, Clone)]
pub struct RiccatiStep {
    pub p: SymMatrix,
    /// `-(R + BᵀP⁺B)⁻¹ BᵀP⁺A`
    pub gain: Matrix,
    /// `R + BᵀP⁺B`
    pub r_tilde: SymMatrix,
}

/// Maps `P⁺ = P(k+1)` to `P(k)`. The update is evaluated in Joseph form
/// `Q + KᵀRK + (A+BK)ᵀP⁺(A+BK)`, which equals the textbook form at the optimal
/// `K` and stays positive semidefinite under rounding.
pub fn riccati_step(a: &Matrix, b: &Matrix, q: &SymMatrix, r: &SymMatrix, p_next: &SymMatrix) -> Result<RiccatiStep> {
    let bt = b.transpose();
    let pb = p_next.as_matrix() * b;
    let r_tilde = SymMatrix::symmetrize(&(r.as_matrix() + &(&bt * &pb)));
    let chol = cholesky(&r_tilde)?;
    let bt_p_a = &pb.transpose() * a;
    let gain = chol.solve(&bt_p_a).scale(-1.0);
    let a_k = &(b * &gain) + a;
    let p = &(q.as_matrix() + &gain.transpose().congruence(r)) + &a_k.transpose().congruence(p_next);
    Ok(RiccatiStep { p: SymMatrix::symmetrize(&p), gain, r_tilde })
}

/// `AᵀPA + Q − AᵀPB(R + BᵀPB)⁻¹BᵀPA`, textbook form.
pub fn riccati_map(a: &Matrix, b: &Matrix, q: &SymMatrix, r: &SymMatrix, p: &SymMatrix) -> Result<SymMatrix> {
    let pb = p.as_matrix() * b;
    let r_tilde = SymMatrix::symmetrize(&(r.as_matrix() + &(&b.transpose() * &pb)));
    let bt_p_a = &pb.transpose() * a;
    let x = cholesky(&r_tilde)?.solve(&bt_p_a);
    let out = &(&a.transpose().congruence(p) + q.as_matrix()) - &(&bt_p_a.transpose() * &x);
    Ok(SymMatrix::symmetrize(&out))
}

/// Fixed-point iteration of the Riccati map from `P₀ = Q` until the step
/// falls below `1e-12 (1 + |P|_max)`. Iteration then continues until the step
/// stops shrinking for a while, keeping the best iterate, which brings the residual down to rounding level at
/// linear cost. Returns the iterate and the number of steps taken.
pub(crate) fn value_iteration(
    a: &Matrix,
    b: &Matrix,
    q: &SymMatrix,
    r: &SymMatrix,
    max_iterations: usize,
) -> Result<(RiccatiStep, usize)> {
    let mut p = q.clone();
    let mut converged_at = None;
    // smallest step seen after convergence and the iterate it started from
    let mut best: Option<(f64, SymMatrix, usize)> = None;
    let mut stalled = 0;
    for it in 1..=max_iterations {
        let step = riccati_step(a, b, q, r, &p)?;
        if !step.p.is_finite() || step.p.max_abs() > 1e150 {
            return Err(Error::NoConvergence { what: "Riccati iteration (diverged)".into(), iterations: it });
        }
        let change = (step.p.as_matrix() - p.as_matrix()).max_abs();
        let scale = 1.0 + p.max_abs();
        if converged_at.is_some() {
            match &best {
                Some((c, _, _)) if change >= *c => stalled += 1,
                _ => {
                    best = Some((change, p.clone(), it - 1));
                    stalled = 0;
                }
            }
            if stalled >= POLISH_PATIENCE || change <= f64::EPSILON * scale {
                break;
            }
        }
        p = step.p;
        if converged_at.is_none() && change <= DARE_STEP_TOL * scale {
            converged_at = Some(it);
        }
    }
    match best {
        Some((_, p, it)) => {
            let fin = riccati_step(a, b, q, r, &p)?;
            Ok((RiccatiStep { p, ..fin }, it))
        }
        None if converged_at.is_some() => {
            let fin = riccati_step(a, b, q, r, &p)?;
            Ok((RiccatiStep { p, ..fin }, max_iterations))
        }
        None => Err(Error::NoConvergence { what: "Riccati iteration".into(), iterations: max_iterations }),
    }
}

/// Stabilizing solution of the algebraic Riccati equation and its gain.
#[derive(Debug, Clone, Serialize)]
pub struct RiccatiSolution {
    #[serde(rename = "P")]
    pub p: SymMatrix,
    #[serde(rename = "K")]
    pub k: Matrix,
    #[serde(rename = "R_tilde")]
    pub r_tilde: SymMatrix,
    pub iterations: usize,
    /// `max|P − riccati_map(P)|`
    pub residual: f64,
}

impl RiccatiSolution {
    /// `tr(P Σ_W)`, the stage cost of the optimal stationary pair.
    pub fn stationary_cost(&self, sys: &LtiStochasticSystem) -> f64 {
        self.p.trace_product(sys.sigma_w())
    }
}

pub fn solve_dare(sys: &LtiStochasticSystem, cost: &QuadraticCost) -> Result<RiccatiSolution> {
    cost.check_dims(sys)?;
    let (step, iterations) = value_iteration(sys.a(), sys.b(), cost.q(), cost.r(), DARE_MAX_ITERATIONS)?;
    let residual = (step.p.as_matrix() - riccati_map(sys.a(), sys.b(), cost.q(), cost.r(), &step.p)?.as_matrix())
        .max_abs();
    if !is_schur_stable(&sys.closed_loop(&step.gain))? {
        return Err(Error::NoConvergence {
            what: "Riccati iteration (limit is not stabilizing)".into(),
            iterations,
        });
    }
    Ok(RiccatiSolution { p: step.p, k: step.gain, r_tilde: step.r_tilde, iterations, residual })
}

/// `P_N(0..=N)` and `K_N(0..N)` of the finite-horizon problem.
#[derive(Debug, Clone, Serialize)]
pub struct GainSchedule {
    horizon: usize,
    p_seq: Vec<SymMatrix>,
    k_seq: Vec<Matrix>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `P_N(k)`, `k = 0..=N`.
    pub fn costs_to_go(&self) -> &[SymMatrix] {
        &self.p_seq
    }

    /// `K_N(k)`, `k = 0..N`.
    pub fn gains(&self) -> &[Matrix] {
        &self.k_seq
    }
}

pub fn riccati_backward(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    horizon: usize,
    terminal: &SymMatrix,
) -> Result<GainSchedule> {
    cost.check_dims(sys)?;
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if terminal.dim() != sys.n() {
        return Err(Error::DimensionMismatch(format!("terminal weight is {0}x{0}", terminal.dim())));
    }
    psd_factor(terminal).map_err(|e| Error::NotPositiveSemidefinite(format!("terminal weight: {e}")))?;
    let mut p_seq = vec![terminal.clone(); horizon + 1];
    let mut k_seq = vec![Matrix::zeros(sys.l(), sys.n()); horizon];
    for k in (0..horizon).rev() {
        let step = riccati_step(sys.a(), sys.b(), cost.q(), cost.r(), &p_seq[k + 1])?;
        p_seq[k] = step.p;
        k_seq[k] = step.gain;
    }
    Ok(GainSchedule { horizon, p_seq, k_seq })
}

/// The four terms of `J_N = Σ E|U−KX|²_R̃ + E|X₀|²_P − E|X(N)|²_P + Σ E|W|²_P`,
/// next to `J_N` summed directly from stage costs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostDecomposition {
    pub control_deviation: f64,
    pub initial: f64,
    /// Carries its minus sign.
    pub terminal: f64,
    pub noise: f64,
    pub direct: f64,
}

impl CostDecomposition {
    pub fn total(&self) -> f64 {
        self.control_deviation + self.initial + self.terminal + self.noise
    }

    pub fn residual(&self) -> f64 {
        (self.total() - self.direct).abs()
    }
}

/// Direct `J_N = Σ_{k<N} ℓ(X(k), U(k))` on exact moments.
pub fn trajectory_cost(cost: &QuadraticCost, traj: &MomentTrajectory) -> f64 {
    (0..traj.horizon()).map(|k| stage_cost(cost, &traj.state_control(k))).sum()
}

pub fn modified_cost_decomposition(
    sys: &LtiStochasticSystem,
    cost: &QuadraticCost,
    sol: &RiccatiSolution,
    traj: &MomentTrajectory,
) -> CostDecomposition {
    let horizon = traj.horizon();
    let control_deviation = (0..horizon)
        .map(|k| {
            let step = traj.control().step(k);
            let g = Matrix::hstack(&[&(&step.state_gain - &sol.k), &step.stationary_gain]);
            let (mean, cov) = traj.joint(k);
            affine_quad_expectation(mean, cov, &g, &step.offset, &sol.r_tilde)
        })
        .sum();
    CostDecomposition {
        control_deviation,
        initial: traj.state(0).weighted_second_moment(&sol.p),
        terminal: -traj.state(horizon).weighted_second_moment(&sol.p),
        noise: horizon as f64 * sol.stationary_cost(sys),
        direct: trajectory_cost(cost, traj),
    }
}
